import numpy as np
import pytest
from hypothesis import settings

from urewrite.corpus import DialogueSample, build_vocab
from urewrite.model import ModelConfig, RewriterModel
from urewrite.synthetic import SyntheticSpec, generate_synthetic

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticSpec(num_samples=120, seed=11))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


def tiny_config(vocab, head="ptr-lambda", **kw):
    base = dict(vocab_size=len(vocab), d_model=8, n_heads=2, n_layers=2, d_ff=16,
                max_positions=64, max_turns=8, head=head, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(small_vocab):
    def make(head="ptr-lambda", seed=0, **kw):
        return RewriterModel(tiny_config(small_vocab, head, **kw), seed=seed)
    return make


@pytest.fixture
def messi_sample():
    # history mentions the antecedent; the utterance uses a pronoun
    return DialogueSample([list("你喜欢梅西吗"), list("是的很喜欢他")], list("他多高"), list("梅西多高"))


def perturb(model, rng, scale=0.5):
    """Move biases and gate vectors off zero so their gradients are exercised."""
    for name, p in model.params.items():
        if name.startswith(("gate", "pgen")) or ".b" in name or "bias" in name:
            p.data += rng.uniform(-scale, scale, p.shape)
    return model
