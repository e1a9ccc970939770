"""Caption metrics: BLEU@4, ROUGE-L, CIDEr-D, Div-n and RE-4.

Scores are computed per video (candidate paragraph vs. its references) and
the corpus score is the plain average over videos.  METEOR is not provided.
"""

from __future__ import annotations

import csv
import io
import json
import math
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field

from .errors import InputError

COLUMNS = ("video_id", "bleu4", "rouge_l", "cider_d", "div2", "re4")
BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_N = 4


@dataclass
class CaptionSet:
    video_id: str
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise InputError(f"video {self.video_id!r} has no reference captions")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop Unicode punctuation (category P*), split on whitespace."""
    kept = "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P"))
    return kept.split()


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU


def bleu4(candidate, references, smooth: bool = True) -> float:
    """Sentence BLEU with clipped n-gram precisions (n = 1..4) and brevity penalty.

    With ``smooth`` a zero match count for some order adds ``BLEU_EPS`` to
    that numerator; a candidate without any unigram match still scores 0.
    Candidates shorter than four words average over the orders they contain.
    """
    c = len(candidate)
    if c == 0 or not references:
        return 0.0
    # orders longer than the candidate have no n-grams and are left out of the mean
    orders = range(1, min(4, c) + 1)
    log_p = 0.0
    for n in orders:
        cand = ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            for g, k in ngrams(ref, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matched = sum(min(k, max_ref[g]) for g, k in cand.items())
        total = sum(cand.values())
        if matched == 0:
            if n == 1 or not smooth:
                return 0.0
            matched = BLEU_EPS
        log_p += math.log(matched / total) / len(orders)
    # closest reference length, ties broken toward the shorter one
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return min(1.0, bp * math.exp(log_p))


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure ``(1+b^2)PR / (R + b^2 P)``, best over references."""
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


# ---------------------------------------------------------------- CIDEr-D


def document_frequency(corpus: list[CaptionSet], n_max: int = CIDER_N) -> Counter:
    """Number of videos whose reference set contains each n-gram."""
    df: Counter = Counter()
    for item in corpus:
        grams = set()
        for ref in item.references:
            for n in range(1, n_max + 1):
                grams.update(ngrams(ref, n))
        df.update(grams)
    return df


def _tfidf(tokens, n, df, log_n_docs):
    vec = {}
    for g, tf in ngrams(tokens, n).items():
        vec[g] = tf * (log_n_docs - math.log(max(1.0, df.get(g, 0.0))))
    return vec


def _clipped_cosine(cand: dict, ref: dict) -> float:
    num = sum(min(v, ref[g]) * ref[g] for g, v in cand.items() if g in ref)
    nc = math.sqrt(sum(v * v for v in cand.values()))
    nr = math.sqrt(sum(v * v for v in ref.values()))
    if nc == 0 or nr == 0:
        return 0.0
    return num / (nc * nr)


def _cider_pair(cand, ref, df, log_n_docs, sigma) -> float:
    # orders longer than the reference are left out of the mean
    orders = range(1, min(CIDER_N, len(ref)) + 1)
    if not orders:
        return 0.0
    penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
    total = 0.0
    for n in orders:
        vc = _tfidf(cand, n, df, log_n_docs)
        vr = _tfidf(ref, n, df, log_n_docs)
        sim = _clipped_cosine(vc, vr)
        if sim == 0.0 and not any(vc.values()) and not any(vr.values()):
            # every shared n-gram occurs in all videos (e.g. a one-video
            # corpus), so IDF weights are all zero: fall back to raw counts
            sim = _clipped_cosine(dict(ngrams(cand, n)), dict(ngrams(ref, n)))
        total += sim * penalty
    return total / len(orders)


def cider_d(corpus: list[CaptionSet], sigma: float = CIDER_SIGMA) -> list[float]:
    """CIDEr-D per video; IDF comes from the references of this corpus."""
    if not corpus:
        raise InputError("CIDEr-D needs a non-empty corpus")
    df = document_frequency(corpus)
    log_n = math.log(float(len(corpus)))
    scores = []
    for item in corpus:
        sims = [_cider_pair(item.candidate, ref, df, log_n, sigma) for ref in item.references]
        scores.append(10.0 * sum(sims) / len(sims))
    return scores


# ---------------------------------------------------------------- diversity


def div_n(paragraph, n: int = 2) -> float:
    """Distinct n-grams divided by the number of words."""
    if len(paragraph) < n:
        return 0.0
    return len(ngrams(paragraph, n)) / len(paragraph)


def div2(paragraph) -> float:
    return div_n(paragraph, 2)


def re4(paragraph) -> float:
    """Share of sliding 4-grams that repeat an earlier one."""
    grams = ngrams(paragraph, 4)
    total = sum(grams.values())
    if total == 0:
        return 0.0
    return sum(k - 1 for k in grams.values()) / total


# ---------------------------------------------------------------- report


@dataclass
class MetricRow:
    video_id: str
    bleu4: float
    rouge_l: float
    cider_d: float
    div2: float
    re4: float
    div1: float = 0.0

    def csv_values(self):
        return [self.video_id] + [repr(float(getattr(self, k))) for k in COLUMNS[1:]]


@dataclass
class MetricReport:
    rows: list[MetricRow]
    corpus: MetricRow = field(default=None)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows]

    def to_dict(self) -> dict:
        return {"videos": [asdict(r) for r in self.rows], "corpus": asdict(self.corpus)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows + [self.corpus]:
            w.writerow(r.csv_values())
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([MetricRow(**r) for r in d["videos"]], MetricRow(**d["corpus"]))


def corpus_report(corpus: list[CaptionSet], smooth_bleu: bool = True) -> MetricReport:
    """Per-video scores plus their arithmetic mean (video id ``corpus``)."""
    if not corpus:
        raise InputError("cannot score an empty corpus")
    ciders = cider_d(corpus)
    rows = []
    for item, cd in zip(corpus, ciders):
        rows.append(MetricRow(
            video_id=item.video_id,
            bleu4=bleu4(item.candidate, item.references, smooth=smooth_bleu),
            rouge_l=rouge_l(item.candidate, item.references),
            cider_d=cd,
            div2=div2(item.candidate),
            re4=re4(item.candidate),
            div1=div_n(item.candidate, 1),
        ))
    n = len(rows)
    mean = {k: sum(getattr(r, k) for r in rows) / n for k in ("bleu4", "rouge_l", "cider_d", "div2", "re4", "div1")}
    return MetricReport(rows, MetricRow("corpus", **mean))


def load_caption_file(path) -> list[CaptionSet]:
    """Read ``{video_id: {"candidate": str, "references": [str, ...]}}``."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or not raw:
        raise InputError(f"{path}: expected a non-empty object keyed by video id")
    out = []
    for vid, entry in raw.items():
        try:
            cand = tokenize(entry["candidate"])
            refs = [tokenize(r) for r in entry["references"]]
        except (KeyError, TypeError, AttributeError):
            raise InputError(f"{path}: entry {vid!r} needs 'candidate' and 'references'") from None
        out.append(CaptionSet(str(vid), cand, refs))
    return out
