"""Seeded probabilistic grammar for the synthetic pre-training corpus.

Sentences have the shape ``DET [ADJ] NOUN VERB [DET [ADJ] NOUN] [PREP DET [ADJ] NOUN] [ADV] .``
with number agreement between determiner, noun and verb, and content words
mostly drawn from one topic per sentence, so masked tokens are predictable
from context. Word choice within each category is Zipfian.

Shift variants keep the vocabulary but move the distribution:

* ``ood1`` reverses the frequency ranking inside every category, weakens
  topical coherence and changes the optional-phrase rates.
* ``ood2`` additionally breaks agreement (plural subjects take singular verb
  forms and vice versa).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

SHIFTS = ("none", "ood1", "ood2")

# Each topic owns its nouns, verbs and adjectives; a sentence stays on one
# topic with probability ``GrammarRates.on_topic`` per content word.
TOPICS = {
    "farm": (["cat", "dog", "horse", "farmer", "cow", "goat"],
             ["feed", "chase", "watch", "carry"], ["sleep", "eat", "wait"],
             ["old", "brown", "lazy", "muddy"]),
    "sea": (["ship", "sailor", "fish", "whale", "captain", "wave"],
            ["sail", "follow", "pull", "meet"], ["swim", "drift", "sink"],
            ["blue", "wet", "salty", "deep"]),
    "school": (["teacher", "student", "child", "book", "pencil", "poet"],
               ["read", "write", "help", "teach"], ["study", "laugh", "sing"],
               ["young", "clever", "quiet", "small"]),
    "city": (["king", "queen", "robot", "doctor", "house", "tower"],
             ["build", "find", "visit", "guard"], ["work", "fall", "shine"],
             ["tall", "bright", "strange", "rich"]),
}
NOUNS = [n for t in TOPICS.values() for n in t[0]]
VERBS_T = [v for t in TOPICS.values() for v in t[1]]
VERBS_I = [v for t in TOPICS.values() for v in t[2]]
ADJS = [a for t in TOPICS.values() for a in t[3]]
PLURAL = {"child": "children", "fish": "fish", "sheep": "sheep"}
PREPS = ["near", "under", "behind", "beside", "over", "with"]
ADVS = ["quickly", "slowly", "today", "often", "again", "loudly"]
DET_SG = ["a", "this", "every", "the"]
DET_PL = ["these", "many", "some", "the"]


def plural(noun: str) -> str:
    return PLURAL.get(noun, noun + "s")


def third_person(verb: str) -> str:
    return verb + ("es" if verb.endswith(("ch", "sh", "s")) else "s")


@dataclass(frozen=True)
class GrammarRates:
    adj: float = 0.4
    obj: float = 0.6
    pp: float = 0.35
    adv: float = 0.25
    plural: float = 0.4
    on_topic: float = 0.9
    zipf: float = 1.1
    reverse_ranks: bool = False
    break_agreement: bool = False


def rates_for(shift: str) -> GrammarRates:
    if shift == "none":
        return GrammarRates()
    if shift == "ood1":
        return GrammarRates(adj=0.7, obj=0.4, pp=0.6, adv=0.5, plural=0.6, on_topic=0.5,
                            reverse_ranks=True)
    if shift == "ood2":
        return GrammarRates(adj=0.7, obj=0.4, pp=0.6, adv=0.5, plural=0.6, on_topic=0.5,
                            reverse_ranks=True, break_agreement=True)
    raise ValueError(f"unknown shift {shift!r}; expected one of {SHIFTS}")


class Grammar:
    def __init__(self, shift: str = "none", seed: int = 0):
        self.rates = rates_for(shift)
        self.rng = np.random.default_rng(seed)

    def _pick(self, words: list[str]) -> str:
        n = len(words)
        w = 1.0 / np.arange(1, n + 1) ** self.rates.zipf
        if self.rates.reverse_ranks:
            w = w[::-1]
        return words[self.rng.choice(n, p=w / w.sum())]

    def _content(self, topic: int, slot: int) -> str:
        if self.rng.random() < self.rates.on_topic:
            return self._pick(list(TOPICS.values())[topic][slot])
        return self._pick((NOUNS, VERBS_T, VERBS_I, ADJS)[slot])

    def _noun_phrase(self, topic: int) -> tuple[list[str], bool]:
        is_plural = bool(self.rng.random() < self.rates.plural)
        det = self._pick(DET_PL if is_plural else DET_SG)
        words = [det]
        if self.rng.random() < self.rates.adj:
            words.append(self._content(topic, 3))
        noun = self._content(topic, 0)
        words.append(plural(noun) if is_plural else noun)
        return words, is_plural

    def sentence(self) -> list[str]:
        topic = int(self.rng.integers(len(TOPICS)))
        subj, is_plural = self._noun_phrase(topic)
        verb_plural = is_plural != self.rates.break_agreement
        transitive = bool(self.rng.random() < self.rates.obj)
        verb = self._content(topic, 1 if transitive else 2)
        words = subj + [verb if verb_plural else third_person(verb)]
        if transitive:
            words += self._noun_phrase(topic)[0]
        if self.rng.random() < self.rates.pp:
            words.append(self._pick(PREPS))
            words += self._noun_phrase(topic)[0]
        if self.rng.random() < self.rates.adv:
            words.append(self._pick(ADVS))
        words.append(".")
        return words


def generate_sentences(n_tokens: int, seed: int = 0, shift: str = "none") -> list[str]:
    """Sentences (space-joined) until at least ``n_tokens`` tokens have been produced."""
    grammar = Grammar(shift, seed)
    lines, count = [], 0
    while count < n_tokens:
        words = grammar.sentence()
        lines.append(" ".join(words))
        count += len(words)
    return lines


def write_corpus(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def unigram_shift(reference: list[str], other: list[str]) -> dict:
    """Chi-squared homogeneity test between two corpora's unigram counts."""
    from scipy.stats import chi2_contingency

    a = Counter(w for line in reference for w in line.split())
    b = Counter(w for line in other for w in line.split())
    vocab = sorted(set(a) | set(b))
    table = np.array([[a[w] for w in vocab], [b[w] for w in vocab]], dtype=float)
    table = table[:, table.sum(axis=0) > 0]
    chi2, p_value, dof, _ = chi2_contingency(table)
    return {"chi2": float(chi2), "dof": int(dof), "p_value": float(p_value), "shifted": bool(p_value < 1e-3)}
