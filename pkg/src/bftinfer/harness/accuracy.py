"""Monte-Carlo study of ensemble accuracy when some group members lie.

Each trial draws a true label and a shared logit vector (sample difficulty,
common to every model) plus bounded per-model noise whose width sets each
model's individual accuracy. Every model reports a softmax confidence
vector. The ensemble keeps the results picked by quorum selection and
predicts the label that more than ``f`` of them rank first; when several
labels qualify, or none does, summed confidence decides.

Three settings run on the same draws:

* honest: every model reports its own output;
* beyond: the ``f`` dishonest models report a confident wrong label that is
  farther than epsilon from every honest result;
* within: the ``f`` dishonest models push confidence from the leading label
  toward the runner-up as far as epsilon allows while staying within
  epsilon of every other result, so quorum selection keeps them.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from ..distance import Metric, delta, select_quorum


@dataclass(frozen=True)
class AccuracySpec:
    group_size: int = 4
    faulty: int = 1
    epsilon: float = 0.22  # just above the largest honest diameter seen for these defaults
    trials: int = 10_000
    classes: int = 10
    signal: float = 2.2  # logit bonus of the true label
    shared_sigma: float = 1.0  # difficulty noise common to all models
    noise: tuple = (0.2, 0.25, 0.3, 0.35)  # per-model noise half-widths, cycled
    metric: Metric = Metric.CHEBYSHEV
    seed: int = 0


@dataclass
class AccuracyReport:
    spec: AccuracySpec
    single: list = field(default_factory=list)  # per-model accuracy, honest
    honest: float = 0.0
    beyond: float = 0.0
    within: float = 0.0
    honest_subset: float = 0.0  # ensemble of only the honest models
    beyond_excluded: float = 0.0  # share of trials where every beyond-epsilon result was left out
    beyond_matches_subset: float = 0.0  # share of trials where beyond == honest-only ensemble
    honest_within_eps: float = 0.0  # share of trials with honest diameter <= epsilon

    @property
    def best_single(self) -> float:
        return max(self.single)

    @property
    def worst_single(self) -> float:
        return min(self.single)

    def as_dict(self) -> dict:
        return {
            "single": self.single,
            "best_single": self.best_single,
            "worst_single": self.worst_single,
            "honest": self.honest,
            "honest_subset": self.honest_subset,
            "beyond": self.beyond,
            "within": self.within,
            "beyond_excluded": self.beyond_excluded,
            "beyond_matches_subset": self.beyond_matches_subset,
            "honest_within_eps": self.honest_within_eps,
        }


def _softmax(logits):
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    total = math.fsum(exps)
    return tuple(e / total for e in exps)


def _argmax(v) -> int:
    return max(range(len(v)), key=lambda i: (v[i], -i))


def ensemble_label(outputs, f: int) -> int:
    """Label ranked first by more than ``f`` outputs; summed confidence breaks ties and fills gaps."""
    classes = len(outputs[0])
    votes = [0] * classes
    total = [0.0] * classes
    for out in outputs:
        votes[_argmax(out)] += 1
        for c in range(classes):
            total[c] += out[c]
    agreed = [c for c in range(classes) if votes[c] > f]
    pool = agreed or list(range(classes))
    return max(pool, key=lambda c: (total[c], -c))


def _ensemble(results: dict, n: int, f: int, spec: AccuracySpec):
    q = select_quorum(results, n, f, spec.metric, spec.epsilon)
    if not q.satisfied:
        return None, q
    return ensemble_label([results[i] for i in q.selected], f), q


def _push_within(own, others, eps: float, target: int, leader: int):
    """Move ``own`` toward ``target`` and away from ``leader`` inside the epsilon box of ``others``."""
    out = list(own)
    lo_t = max(o[target] for o in others) - eps
    hi_t = min(o[target] for o in others) + eps
    lo_l = max(o[leader] for o in others) - eps
    hi_l = min(o[leader] for o in others) + eps
    if lo_t <= hi_t:
        out[target] = min(1.0, hi_t)
    if lo_l <= hi_l:
        out[leader] = max(0.0, lo_l)
    return tuple(out)


def accuracy_experiment(spec: AccuracySpec = AccuracySpec()) -> AccuracyReport:
    rng = random.Random(spec.seed)
    k, f, c = spec.group_size, spec.faulty, spec.classes
    widths = [spec.noise[m % len(spec.noise)] for m in range(k)]
    # the adversary takes over the f most accurate models (smallest noise)
    dishonest = sorted(range(k), key=lambda m: (widths[m], m))[:f]
    honest_ids = [m for m in range(k) if m not in dishonest]
    correct_single = [0] * k
    hits = {"honest": 0, "beyond": 0, "within": 0, "subset": 0}
    excluded = matches = within_eps = 0

    for _ in range(spec.trials):
        label = rng.randrange(c)
        shared = [rng.gauss(0.0, spec.shared_sigma) for _ in range(c)]
        shared[label] += spec.signal
        outs = {}
        for m in range(k):
            w = widths[m]
            outs[m] = _softmax([s + rng.uniform(-w, w) for s in shared])
            if _argmax(outs[m]) == label:
                correct_single[m] += 1
        honest_outs = [outs[m] for m in honest_ids]
        diam = max((delta(spec.metric, a, b) for i, a in enumerate(honest_outs) for b in honest_outs[i + 1:]),
                   default=0.0)
        within_eps += diam <= spec.epsilon

        pred, _ = _ensemble(outs, k, f, spec)
        hits["honest"] += pred == label

        # the honest models alone, under the same N - f threshold
        sub_pred, _ = _ensemble({m: outs[m] for m in honest_ids}, k, f, spec)
        hits["subset"] += sub_pred == label

        # beyond: a confident wrong label no honest result comes close to
        lying = dict(outs)
        for m in dishonest:
            wrong = min((x for x in range(c) if x != label),
                        key=lambda x: (max(o[x] for o in honest_outs), x))
            lying[m] = tuple(1.0 if x == wrong else 0.0 for x in range(c))
        pred_b, q_b = _ensemble(lying, k, f, spec)
        if not set(dishonest) & set(q_b.selected):
            excluded += 1
        hits["beyond"] += pred_b == label
        matches += pred_b == sub_pred

        # within: steer toward the strongest wrong label while staying in the quorum
        summed = [sum(o[x] for o in honest_outs) for x in range(c)]
        order = sorted(range(c), key=lambda x: (-summed[x], x))
        leader, runner = order[0], order[1]
        target = runner if leader == label else leader
        lying = dict(outs)
        for m in dishonest:
            others = [outs[j] for j in range(k) if j != m]
            lying[m] = _push_within(outs[m], others, spec.epsilon, target, label)
        pred_w, _ = _ensemble(lying, k, f, spec)
        hits["within"] += pred_w == label

    t = spec.trials
    return AccuracyReport(
        spec=spec,
        single=[x / t for x in correct_single],
        honest=hits["honest"] / t,
        beyond=hits["beyond"] / t,
        within=hits["within"] / t,
        honest_subset=hits["subset"] / t,
        beyond_excluded=excluded / t,
        beyond_matches_subset=matches / t,
        honest_within_eps=within_eps / t,
    )
