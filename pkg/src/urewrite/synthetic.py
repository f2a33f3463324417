"""Template-driven synthetic dialogues with coreference and omission.

Each template has an explicit ("fully rewritten") utterance containing an
entity slot ``{E}`` and an omittable verb slot ``[{V}]``.  Both fillers are
mentioned in the history.  A sample is produced by

* coreference: replacing the entity slot with a pronoun,
* omission: dropping the verb slot,
* both, or neither (the explicit form, R == U).

Entity names are random strings over a pool of name characters that never
occur in template text, so a model can only get them right by copying.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .corpus import Coref, DialogueSample, Omission, apply_annotations, tokenize
from .errors import ConfigError

CATEGORIES = {
    "person": {"word": "人", "verbs": ["喜欢", "认识", "支持"], "pronouns": ["他", "她"]},
    "movie": {"word": "电影", "verbs": ["看过", "喜欢", "推荐"], "pronouns": ["它"]},
    "game": {"word": "游戏", "verbs": ["玩", "喜欢"], "pronouns": ["它"]},
    "city": {"word": "城市", "verbs": ["去过", "想去"], "pronouns": ["它"]},
    "book": {"word": "书", "verbs": ["读过", "喜欢"], "pronouns": ["它"]},
    "song": {"word": "歌", "verbs": ["听过", "会唱"], "pronouns": ["它"]},
    "team": {"word": "球队", "verbs": ["支持", "看好"], "pronouns": ["它"]},
    "food": {"word": "菜", "verbs": ["吃过", "会做"], "pronouns": ["它"]},
}

HISTORY_FRAMES = [
    ["你{V}{E}吗", "是的 我一直很{V}{E}"],
    ["你最{V}哪个{C}", "当然是{E}"],
    ["我最近{V}了{E}", "{E}怎么样"],
    ["{E}是什么{C}", "{E}是很有名的{C} 你{V}吗"],
    ["{E}和{F}你更{V}哪个", "{E}"],
    ["有什么{C}值得{V}", "我觉得{E}不错"],
]

# explicit utterance forms; [..] marks the omittable span
UTTERANCE_FRAMES = [
    "为什么你这么[{V}]{E}",
    "你什么时候开始[{V}]{E}的",
    "{E}真的值得大家[{V}]吗",
    "还有谁也[{V}]{E}",
    "你为什么不[{V}]{E}呢",
    "{E}有多少人[{V}]",
]

FILLER_TURNS = ["你好", "在吗", "哈哈", "嗯嗯", "早上好", "对啊"]

# candidate name characters; anything that also appears in templates is dropped
NAME_POOL = (
    "梅西罗纳尔多科比詹姆斯泰坦尼克朱丽叶莎士比亚英雄联盟伦敦巴黎东京纽约柏林"
    "丁卫冯卢叶孙宋宏岳帆康张彭徐志斌昊晨杰林柯桂梁森楠毅沈泽涛淼潘瑞璐"
    "田皓石磊秦程竹米粤红紫翔舟航苏茂莉菲萌蒋薇蓝蔡袁许谢赵邓郑鑫钱铭锦阳"
    "陶雪霖静韩顾飞马鹏黄龙兰菊松柳桃杏梨橙枫桐槐榕琴棋书画诗词曲赋江河湖海"
    "山川峰岭溪泉云雾霞虹星辰宇宙乾坤星辉曜晖烁熠琳琅珂珀瑜璟瑾璋"
)


@dataclass
class SyntheticSpec:
    num_samples: int = 2000
    vocab_budget: int = 300
    turn_range: Tuple[int, int] = (3, 5)  # total turns including the utterance
    coref_rate: float = 0.335
    omission_rate: float = 0.524
    neither_rate: float = 0.297
    seed: int = 7

    def category_shares(self):
        """Fractions of (both, coref only, omission only, neither)."""
        c, o, n = self.coref_rate, self.omission_rate, self.neither_rate
        for name, v in (("coref_rate", c), ("omission_rate", o), ("neither_rate", n)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if c + o + n < 1.0 - 1e-9:
            raise ConfigError(f"rates coref={c} omission={o} neither={n} cannot cover every sample "
                              f"(they must sum to at least 1; any excess is the overlap)")
        both = c + o + n - 1.0
        shares = np.array([both, c - both, o - both, n])
        if (shares < -1e-12).any() or shares.sum() <= 0:
            raise ConfigError(f"inconsistent rates coref={c} omission={o} neither={n}")
        shares = np.clip(shares, 0.0, None)
        return shares / shares.sum()

    def validate(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be positive")
        lo, hi = self.turn_range
        if not 3 <= lo <= hi:
            raise ConfigError(f"turn_range must satisfy 3 <= min <= max, got {self.turn_range}")
        self.category_shares()
        return self


def template_tokens():
    """Every token that template text (frames, verbs, pronouns, fillers) can produce."""
    texts = list(FILLER_TURNS) + [t for f in HISTORY_FRAMES for t in f] + list(UTTERANCE_FRAMES)
    for info in CATEGORIES.values():
        texts += [info["word"]] + info["verbs"] + info["pronouns"]
    toks = set()
    for t in texts:
        for ph in ("{E}", "{F}", "{V}", "{C}", "[", "]"):
            t = t.replace(ph, " ")
        toks.update(tokenize(t))
    return toks


def name_chars(vocab_budget):
    reserved = template_tokens()
    pool = []
    for ch in NAME_POOL:
        if ch not in reserved and ch not in pool:
            pool.append(ch)
    room = vocab_budget - len(reserved)
    if room < 12:
        raise ConfigError(
            f"vocab_budget={vocab_budget} leaves {room} name characters; "
            f"templates alone need {len(reserved)} tokens plus at least 12 for names")
    return pool[:room]


def _fill(text, slots):
    for k, v in slots.items():
        text = text.replace("{" + k + "}", v)
    return text


def _render_utterance(frame, slots, pronoun, coref, omit):
    """Returns (utterance tokens, reference tokens, corefs, omissions)."""
    pre, rest = frame.split("[", 1)
    span, post = rest.split("]", 1)
    pieces = [("lit", pre), ("omit", span), ("lit", post)]
    utt, corefs, omissions = [], [], []
    for kind, text in pieces:
        if kind == "omit":
            toks = tokenize(_fill(text, slots))
            if omit:
                omissions.append(Omission(len(utt), toks))
            else:
                utt.extend(toks)
            continue
        for j, chunk in enumerate(text.split("{E}")):
            if j > 0:
                ent = tokenize(slots["E"])
                if coref:
                    corefs.append(Coref((len(utt), len(utt) + 1), ent))
                    utt.append(pronoun)
                else:
                    utt.extend(ent)
            utt.extend(tokenize(_fill(chunk, slots)))
    ref, _ = apply_annotations(utt, corefs, omissions)
    return utt, ref, corefs, omissions


def generate_synthetic(spec):
    """Generate ``spec.num_samples`` annotated dialogues, reproducibly from ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    chars = name_chars(spec.vocab_budget)
    cats = sorted(CATEGORIES)

    shares = spec.category_shares()
    counts = np.floor(shares * spec.num_samples).astype(int)
    for k in np.argsort(-(shares * spec.num_samples - counts))[: spec.num_samples - counts.sum()]:
        counts[k] += 1
    kinds = np.repeat(np.arange(4), counts)
    kinds = kinds[rng.permutation(len(kinds))]

    def new_name(exclude=()):
        while True:
            n = int(rng.integers(2, 4))
            name = "".join(chars[int(i)] for i in rng.choice(len(chars), size=n, replace=False))
            if name not in exclude:
                return name

    samples = []
    for idx, kind in enumerate(kinds):
        coref = kind in (0, 1)
        omit = kind in (0, 2)
        cat = cats[int(rng.integers(len(cats)))]
        info = CATEGORIES[cat]
        e = new_name()
        f = new_name((e,))
        slots = {"E": e, "F": f, "C": info["word"],
                 "V": info["verbs"][int(rng.integers(len(info["verbs"])))]}
        pronoun = info["pronouns"][int(rng.integers(len(info["pronouns"])))]
        h_id = int(rng.integers(len(HISTORY_FRAMES)))
        u_id = int(rng.integers(len(UTTERANCE_FRAMES)))
        history = [tokenize(_fill(t, slots)) for t in HISTORY_FRAMES[h_id]]
        n_turns = int(rng.integers(spec.turn_range[0], spec.turn_range[1] + 1))
        while len(history) < n_turns - 1:
            history.insert(0, tokenize(FILLER_TURNS[int(rng.integers(len(FILLER_TURNS)))]))
        u_slots = slots
        if kind == 3 and rng.random() < 0.5:
            # self-contained question about an entity the history never mentions
            u_slots = dict(slots, E=new_name((e, f)))
        utt, ref, corefs, omissions = _render_utterance(
            UTTERANCE_FRAMES[u_id], u_slots, pronoun, coref, omit)
        s = DialogueSample(history, utt, ref, corefs, omissions,
                           meta={"template": (h_id, u_id), "category": cat})
        samples.append(s.validate())
    return samples


def corpus_stats(samples):
    """Realized rates and average lengths (in tokens)."""
    n = len(samples)
    coref = sum(1 for s in samples if s.gold_corefs)
    omit = sum(1 for s in samples if s.gold_omissions)
    neither = sum(1 for s in samples if not s.gold_corefs and not s.gold_omissions)
    return {
        "num_samples": n,
        "coref_rate": coref / n,
        "omission_rate": omit / n,
        "neither_rate": neither / n,
        "positive_rate": sum(s.is_positive for s in samples) / n,
        "avg_rewrite_length": float(np.mean([len(s.reference) for s in samples])),
        "avg_conversation_length": float(np.mean(
            [sum(map(len, s.history)) + len(s.utterance) for s in samples])),
    }
