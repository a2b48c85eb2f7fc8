"""Closed-form compression and preservation accounting.

Every quantity reported here is computable from singular spectra and
parameter counts alone. Two parameter accountings coexist on purpose:
the closed-form ratio ``m*n / (H*r*(m+n) + H*(r+1))`` counts a separate
down-projection per head, while the built architecture shares one down
across heads. Both numbers appear side by side in reports; they agree
only at H=1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DegenerateInputError, RangeError, ShapeError
from .linalg import condition_number
from .nn import DenseLayer, Layer, Network


def compression_ratio_paper(m: int, n: int, r: int, h: int) -> float:
    """Closed-form ratio with per-head down-projection accounting."""
    if min(m, n, r, h) < 1:
        raise RangeError(f"dimensions must be positive, got {(m, n, r, h)}")
    return (m * n) / (h * r * (m + n) + h * (r + 1))


def param_count_actual(layer: Layer) -> int:
    """Exact trainable-parameter enumeration of a built layer."""
    return layer.param_count()


def spectral_energy(full_spectrum, r: int) -> float:
    """Fraction of squared singular values kept by a rank-r truncation."""
    s = _check_spectrum(full_spectrum)
    if not 1 <= r <= s.size:
        raise RangeError(f"rank {r} out of range [1, {s.size}]")
    sq = s * s
    return float(sq[:r].sum() / sq.sum())


def rank_for_energy(full_spectrum, epsilon: float) -> int:
    """Smallest rank whose retained energy ratio reaches ``1 - epsilon``."""
    s = _check_spectrum(full_spectrum)
    if not 0.0 < epsilon < 1.0:
        raise RangeError(f"epsilon must be in (0, 1), got {epsilon}")
    sq = s * s
    ratios = np.cumsum(sq) / sq.sum()
    hits = np.nonzero(ratios >= 1.0 - epsilon)[0]
    return int(hits[0]) + 1 if hits.size else s.size


def eckart_young_error(full_spectrum, r: int) -> float:
    """Frobenius error of the optimal rank-r approximation: sqrt tail energy."""
    s = np.asarray(full_spectrum, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"spectrum must be a nonempty vector, got shape {s.shape}")
    if not 1 <= r <= s.size:
        raise RangeError(f"rank {r} out of range [1, {s.size}]")
    return float(np.sqrt(np.sum(s[r:] * s[r:])))


@dataclass(frozen=True)
class LayerInfluence:
    """Nonnegative per-layer influence weights, normalized to sum to 1."""

    alpha: tuple[float, ...]

    @classmethod
    def uniform(cls, n_layers: int) -> "LayerInfluence":
        return cls.normalized([1.0] * n_layers)

    @classmethod
    def normalized(cls, weights) -> "LayerInfluence":
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ShapeError("influence weights must be a nonempty vector")
        if np.any(w < 0):
            raise RangeError("influence weights must be nonnegative")
        total = w.sum()
        if total == 0:
            raise DegenerateInputError("influence weights are all zero")
        return cls(alpha=tuple(float(v) for v in w / total))


def preservation_bound(influences: LayerInfluence, spectra: list,
                       r_per_layer: list[int]) -> float:
    """Functional-similarity lower bound from per-layer truncation losses.

    ``1 - sum_l alpha_l * (1 - energy_ratio_l(r_l))``; equals 1 exactly
    when every layer keeps its full spectrum.
    """
    if not (len(influences.alpha) == len(spectra) == len(r_per_layer)):
        raise ShapeError(f"length mismatch: {len(influences.alpha)} influences, "
                         f"{len(spectra)} spectra, {len(r_per_layer)} ranks")
    loss = 0.0
    for a, s, r in zip(influences.alpha, spectra, r_per_layer):
        loss += a * (1.0 - spectral_energy(s, r))
    return 1.0 - loss


@dataclass
class TheoryReport:
    """Aggregate compression and fidelity figures for one inheritance.

    ``rho_paper`` uses the closed-form per-head-down accounting summed over
    layers; ``rho_actual`` divides the teacher's enumerated count by the
    built network's enumerated count (shared down). ``spectral_energy_ratio``
    pools squared singular values across layers, ``eckart_young_error`` is
    the pooled-tail Frobenius error, ``epsilon`` its complement ratio, and
    ``kappa`` the worst per-layer teacher condition number.
    """

    rho_paper: float
    param_count_actual: int
    param_count_teacher: int
    rho_actual: float
    spectral_energy_ratio: float
    eckart_young_error: float
    epsilon: float
    kappa: float
    preservation_lower_bound: float
    per_layer_breakdown: list[dict] = field(default_factory=list)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(asdict(self), indent=indent)

    def summary_lines(self) -> list[str]:
        lines = [
            f"compression ratio: paper formula {self.rho_paper:.4f}, "
            f"actual {self.rho_actual:.4f} "
            f"({self.param_count_teacher} -> {self.param_count_actual} params)",
            f"retained spectral energy {self.spectral_energy_ratio:.6f} "
            f"(epsilon {self.epsilon:.3e}), pooled truncation error "
            f"{self.eckart_young_error:.6e}",
            f"worst teacher condition number {self.kappa:.4e}; "
            f"preservation lower bound {self.preservation_lower_bound:.6f}",
        ]
        for entry in self.per_layer_breakdown:
            lines.append(
                f"  layer {entry['layer']}: {entry['m']}x{entry['n']} r={entry['r']} "
                f"H={entry['h']} epsilon={entry['epsilon']:.3e} "
                f"kappa={entry['kappa']:.3e} kappa_down={entry['kappa_down']:.3e}")
        return lines


def analyze_network(teacher: Network, inherited: Network, r: int, h: int,
                    influences: LayerInfluence | None = None) -> TheoryReport:
    """Build a TheoryReport for an inherited network against its teacher.

    Dense teacher layers are paired positionally with inherited layers;
    per-layer ranks are read off the built layers, so capped ranks report
    their effective value.
    """
    dense = [(i, l) for i, l in enumerate(teacher.layers) if isinstance(l, DenseLayer)]
    built = [l for l in inherited.layers if hasattr(l, "rank")]
    if len(dense) != len(built):
        raise ShapeError(f"teacher has {len(dense)} decomposable layers but the "
                         f"inherited network has {len(built)}")
    breakdown = []
    spectra = []
    ranks = []
    paper_num = 0.0
    paper_den = 0.0
    kept = 0.0
    total = 0.0
    kappa = 0.0
    for (i, t_layer), b_layer in zip(dense, built):
        w = t_layer.weight
        m, n = w.shape
        r_l = b_layer.rank
        s = np.linalg.svd(w, compute_uv=False)
        sq = s * s
        energy = float(sq[:r_l].sum() / sq.sum())
        k_teacher = condition_number(w)
        k_down = condition_number(b_layer.params["w_down"]) \
            if "w_down" in b_layer.params else float("nan")
        breakdown.append({
            "layer": i, "m": m, "n": n, "r": r_l, "h": h,
            "rho_paper": compression_ratio_paper(m, n, r_l, h),
            "param_teacher": t_layer.param_count(),
            "param_actual": b_layer.param_count(),
            "energy_ratio": energy,
            "epsilon": 1.0 - energy,
            "ey_error": eckart_young_error(s, r_l),
            "kappa": k_teacher,
            "kappa_down": k_down,
        })
        spectra.append(s)
        ranks.append(r_l)
        paper_num += m * n
        paper_den += h * r_l * (m + n) + h * (r_l + 1)
        kept += float(sq[:r_l].sum())
        total += float(sq.sum())
        kappa = max(kappa, k_teacher)
    if influences is None:
        influences = LayerInfluence.uniform(len(spectra))
    actual = inherited.param_count()
    teacher_count = teacher.param_count()
    return TheoryReport(
        rho_paper=paper_num / paper_den,
        param_count_actual=actual,
        param_count_teacher=teacher_count,
        rho_actual=teacher_count / actual,
        spectral_energy_ratio=kept / total,
        eckart_young_error=float(np.sqrt(total - kept)),
        epsilon=1.0 - kept / total,
        kappa=kappa,
        preservation_lower_bound=preservation_bound(influences, spectra, ranks),
        per_layer_breakdown=breakdown,
    )


def output_cosine_similarity(net_a: Network, net_b: Network, x: np.ndarray) -> float:
    """Mean per-sample cosine similarity of two networks' outputs.

    Empirical diagnostic only; this is not the similarity quantity the
    preservation bound refers to, which is never computed directly.
    """
    a = net_a.forward(x)
    b = net_b.forward(x)
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    ok = den > 0
    if not np.any(ok):
        raise DegenerateInputError("all outputs are zero vectors")
    return float(np.mean(num[ok] / den[ok]))


@dataclass
class HeadGainsReport:
    """Approximation error per head count with a marginal-gain trend flag."""

    rank: int
    head_counts: list[int]
    errors_by_seed: list[list[float]]     # [seed][head index]
    median_errors: list[float]
    diminishing_by_seed: list[bool]
    diminishing_majority: bool


def head_marginal_gains(w: np.ndarray, r: int, h_max: int, task,
                        config, seeds: int = 5) -> HeadGainsReport:
    """Train inherited layers for H = 1..h_max and report error trends.

    Each (seed, H) run fine-tunes a freshly inherited layer on the task
    with an identical schedule and budget; the report flags, per seed,
    whether the marginal error reductions are nonincreasing in H. A trend
    check only; no constant is estimated.

    Layers gate on the raw input and carry head biases, and the harness
    jitter breaks the replica symmetry of freshly copied heads; exact
    copies would receive identical gradients and could never specialize.
    """
    from dataclasses import replace
    from .inherit import inherit_dense
    from .io import gen_synthetic
    from .train import train as run_train
    from .experiments import perturb_heads, GATE_JITTER
    if h_max < 2:
        raise RangeError(f"h_max must be >= 2, got {h_max}")
    head_counts = list(range(1, h_max + 1))
    errors_by_seed = []
    diminishing = []
    for s in range(seeds):
        data = gen_synthetic(replace(task, seed=task.seed + s))
        row = []
        for h in head_counts:
            layer = inherit_dense(w, r, h, gate_input="input",
                                  bias=np.zeros(w.shape[1]))
            net = Network([layer])
            perturb_heads(net, config.seed + s, gate_scale=GATE_JITTER)
            cfg = replace(config, seed=config.seed + s)
            log = run_train(net, data, cfg)
            row.append(log.eval_loss[-1])
        errors_by_seed.append(row)
        gains = [row[i] - row[i + 1] for i in range(len(row) - 1)]
        diminishing.append(all(gains[i] >= gains[i + 1] - 1e-12
                               for i in range(len(gains) - 1)))
    med = [float(np.median([errs[i] for errs in errors_by_seed]))
           for i in range(len(head_counts))]
    return HeadGainsReport(
        rank=r,
        head_counts=head_counts,
        errors_by_seed=errors_by_seed,
        median_errors=med,
        diminishing_by_seed=diminishing,
        diminishing_majority=sum(diminishing) * 2 > len(diminishing),
    )


def _check_spectrum(full_spectrum) -> np.ndarray:
    s = np.asarray(full_spectrum, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"spectrum must be a nonempty vector, got shape {s.shape}")
    if np.any(s < 0) or np.any(s[:-1] < s[1:]):
        raise RangeError("spectrum must be nonnegative and nonincreasing")
    if s[0] == 0.0:
        raise DegenerateInputError("spectral energy of an all-zero spectrum")
    return s
