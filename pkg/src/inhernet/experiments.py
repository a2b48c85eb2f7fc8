"""Reproducible desk-scale experiments and self-check suites.

Three trend experiments back the headline behavioral claims:

1. Distillation helps aggressively compressed inheritors and stops helping
   (or hurts) once the rank is large enough that task loss alone trains the
   inheritor past its teacher.
2. Rank dominates head count; several gated heads beat a single head at
   mid ranks.
3. SVD-initialized inheritors reach a near-teacher loss threshold in far
   fewer epochs than identically shaped randomly initialized ones.

All experiments are bit-deterministic given their seed list. Seed sweeps
fan out across processes when the INHERIT_THREADS environment variable is
set above 1; results are keyed and sorted, never collected in completion
order.

Symmetry note: freshly inherited expert heads are exact copies, and exact
copies receive identical gradients forever, so gating can never
differentiate them. The harness therefore applies a small documented
jitter to heads (and, where routing must emerge quickly, to the gate
weights) after construction. Fidelity tests always run on unjittered
layers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import rng as _rng
from .inherit import inherit_dense, inherit_network
from .io import Dataset, SyntheticTask, atomic_write, gen_synthetic
from .nn import DenseLayer, Network, ReluLayer, make_mlp
from .train import TrainConfig, evaluate, train

# Classification toy task shared by the distillation and head-count
# experiments: four classes, three Gaussian blobs each, moderate overlap.
TOY_TASK = SyntheticTask(kind="blobs", seed=42, n=2000, dim=24, classes=4,
                         per_class=3, separation=1.5)
TEACHER_DIMS = [24, 96, 96, 4]
TEACHER_SEED = 7
TEACHER_SUBSET = 100     # deliberately undertrained teacher (sees 100 samples)
TEACHER_EPOCHS = 10

INSIGHT1_RANKS = (2, 4, 8, 16)
INSIGHT2_HEADS = (1, 2, 3)
INSIGHT2_MID_RANK = 4

HEAD_JITTER = 0.3
GATE_JITTER = 0.5


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("INHERIT_THREADS", "1")))
    except ValueError:
        return 1


def _map_jobs(fn, jobs: list):
    workers = worker_count()
    if workers == 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def perturb_heads(net: Network, seed: int, head_scale: float = HEAD_JITTER,
                  gate_scale: float = 0.0) -> None:
    """Break the head replica symmetry of freshly inherited layers in place."""
    gen = _rng.philox(seed, 7)
    for layer in net.layers:
        if not hasattr(layer, "n_heads"):
            continue
        for h in range(layer.n_heads):
            p = layer.params.get(f"head_{h}")
            if p is None:
                continue
            p += head_scale * np.linalg.norm(p) / np.sqrt(p.size) * \
                gen.standard_normal(p.shape)
        gw = layer.params.get("gate_weight")
        if gate_scale > 0.0 and gw is not None and gw.size:
            gw += gate_scale / np.sqrt(gw.shape[0]) * gen.standard_normal(gw.shape)


def toy_classification_data():
    return gen_synthetic(TOY_TASK)


def build_toy_teacher(data) -> Network:
    """Teacher for the classification experiments, trained on a small subset.

    Undertraining is intentional: the distillation regime flip needs a
    teacher that a high-rank inheritor can out-train on the full split.
    """
    train_ds, eval_ds = data
    subset = Dataset(x=train_ds.x[:TEACHER_SUBSET], y=train_ds.y[:TEACHER_SUBSET],
                     kind="classification")
    teacher = make_mlp(TEACHER_DIMS, seed=TEACHER_SEED)
    cfg = TrainConfig(base_lr=0.1, epochs=TEACHER_EPOCHS, batch_size=64,
                      seed=TEACHER_SEED, loss="ce")
    train(teacher, (subset, eval_ds), cfg)
    return teacher


def spectral_mlp(dims: list[int], seed: int, decay: float = 0.8,
                 scale: float = 2.0) -> Network:
    """ReLU MLP whose weights have geometrically decaying singular values.

    Stand-in for a well-trained teacher: random orthogonal factors around a
    prescribed spectrum, so low-rank truncations retain most of the energy.
    """
    layers = []
    for i, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
        gen = _rng.philox(seed, _rng.STREAM_INIT, i)
        qa, _ = np.linalg.qr(gen.standard_normal((m, m)))
        qb, _ = np.linalg.qr(gen.standard_normal((n, n)))
        k = min(m, n)
        s = scale * decay ** np.arange(k)
        layers.append(DenseLayer((qa[:, :k] * s) @ qb[:k, :], np.zeros(n)))
        if i < len(dims) - 2:
            layers.append(ReluLayer())
    return Network(layers)


# --- insight 1: distillation vs rank -----------------------------------------

def _insight1_job(args):
    teacher, r, seed, use_kd = args
    data = toy_classification_data()
    net = inherit_network(teacher, r=r, h=3, cap_rank=True, gate_input="input")
    perturb_heads(net, seed)
    cfg = TrainConfig(base_lr=0.01, epochs=100, batch_size=32, seed=seed,
                      loss="ce+kd" if use_kd else "ce")
    log = train(net, data, cfg, teacher=teacher if use_kd else None)
    return (r, seed, use_kd, log.eval_acc[-1])


def run_insight1(seeds: int = 5, out_dir=None, plot: bool = False) -> dict:
    """Sweep rank with and without distillation; report the per-rank deltas."""
    data = toy_classification_data()
    teacher = build_toy_teacher(data)
    jobs = [(teacher, r, s, kd)
            for r in INSIGHT1_RANKS for s in range(seeds) for kd in (False, True)]
    acc = {}
    for r, s, kd, a in _map_jobs(_insight1_job, jobs):
        acc[(r, s, kd)] = a
    rows = []
    for r in INSIGHT1_RANKS:
        for s in range(seeds):
            base, kd = acc[(r, s, False)], acc[(r, s, True)]
            rows.append({"r": r, "seed": s, "acc_ce": base, "acc_kd": kd,
                         "delta": kd - base})
    smallest, largest = INSIGHT1_RANKS[0], INSIGHT1_RANKS[-1]
    pos_small = sum(1 for row in rows if row["r"] == smallest and row["delta"] > 0)
    nonpos_large = sum(1 for row in rows if row["r"] == largest and row["delta"] <= 0)
    summary = (f"distillation delta: positive at r={smallest} in {pos_small}/{seeds} "
               f"seeds, nonpositive at r={largest} in {nonpos_large}/{seeds} seeds")
    result = {"rows": rows, "summary": summary, "seeds": seeds,
              "pos_at_smallest": pos_small, "nonpos_at_largest": nonpos_large,
              "majority_flip": pos_small * 2 > seeds and nonpos_large * 2 > seeds}
    if out_dir is not None:
        header = ["r", "seed", "acc_ce", "acc_kd", "delta"]
        write_csv(os.path.join(out_dir, "insight1.csv"), header,
                  [[row[k] for k in header] for row in rows])
        if plot:
            med = {kd: [float(np.median([acc[(r, s, kd)] for s in range(seeds)]))
                        for r in INSIGHT1_RANKS] for kd in (False, True)}
            write_svg_lines(os.path.join(out_dir, "insight1.svg"),
                            {"task loss only": list(zip(INSIGHT1_RANKS, med[False])),
                             "with distillation": list(zip(INSIGHT1_RANKS, med[True]))},
                            title="final accuracy vs rank",
                            xlabel="rank", ylabel="accuracy")
    return result


# --- insight 2: rank vs head count --------------------------------------------

def _insight2_job(args):
    teacher, r, h, seed = args
    data = toy_classification_data()
    net = inherit_network(teacher, r=r, h=h, cap_rank=True, gate_input="input")
    perturb_heads(net, seed)
    cfg = TrainConfig(base_lr=0.03, epochs=80, batch_size=32, seed=seed, loss="ce")
    log = train(net, data, cfg)
    return (r, h, seed, log.eval_acc[-1])


def run_insight2(seeds: int = 5, out_dir=None, plot: bool = False) -> dict:
    """Grid over (rank, head count); compare the two sweep ranges."""
    data = toy_classification_data()
    teacher = build_toy_teacher(data)
    jobs = [(teacher, r, h, s)
            for r in INSIGHT1_RANKS for h in INSIGHT2_HEADS for s in range(seeds)]
    acc = {}
    for r, h, s, a in _map_jobs(_insight2_job, jobs):
        acc[(r, h, s)] = a
    rows = [{"r": r, "h": h, "seed": s, "acc": acc[(r, h, s)]}
            for r in INSIGHT1_RANKS for h in INSIGHT2_HEADS for s in range(seeds)]
    mid = INSIGHT2_MID_RANK
    h3_ge_h1 = sum(1 for s in range(seeds) if acc[(mid, 3, s)] >= acc[(mid, 1, s)])
    range_wins = 0
    for s in range(seeds):
        r_vals = [acc[(r, 3, s)] for r in INSIGHT1_RANKS]
        h_vals = [acc[(mid, h, s)] for h in INSIGHT2_HEADS]
        range_wins += (max(r_vals) - min(r_vals)) > (max(h_vals) - min(h_vals))
    summary = (f"rank-sweep range exceeds head-sweep range in {range_wins}/{seeds} "
               f"seeds; H=3 >= H=1 at r={mid} in {h3_ge_h1}/{seeds} seeds")
    result = {"rows": rows, "summary": summary, "seeds": seeds,
              "h3_ge_h1": h3_ge_h1, "range_wins": range_wins,
              "majority": h3_ge_h1 * 2 > seeds and range_wins * 2 > seeds}
    if out_dir is not None:
        header = ["r", "h", "seed", "acc"]
        write_csv(os.path.join(out_dir, "insight2.csv"), header,
                  [[row[k] for k in header] for row in rows])
        if plot:
            series = {f"H={h}": [(r, float(np.median([acc[(r, h, s)]
                                                      for s in range(seeds)])))
                                 for r in INSIGHT1_RANKS]
                      for h in INSIGHT2_HEADS}
            write_svg_lines(os.path.join(out_dir, "insight2.svg"), series,
                            title="final accuracy vs rank per head count",
                            xlabel="rank", ylabel="accuracy")
    return result


# --- insight 3: convergence speed of SVD init ---------------------------------

MIMIC_DIMS = [16, 64, 64, 8]
MIMIC_RANK = 8
MIMIC_EPOCHS = 80


def _insight3_job(args):
    variant, seed = args
    teacher = spectral_mlp(MIMIC_DIMS, seed=100 + seed)
    task = SyntheticTask(kind="mimic", seed=200 + seed, n=1000, dim=MIMIC_DIMS[0])
    data = gen_synthetic(task, teacher=teacher)
    probe = inherit_network(teacher, r=MIMIC_RANK, h=3, cap_rank=True)
    cfg0 = TrainConfig(base_lr=0.05, epochs=0, batch_size=32, seed=seed, loss="mse")
    threshold = 1.05 * evaluate(probe, data[1].x, data[1].y, cfg0)[0]
    net = inherit_network(teacher, r=MIMIC_RANK, h=3, variant=variant,
                          seed=300 + seed, cap_rank=True)
    cfg = TrainConfig(base_lr=0.05, epochs=MIMIC_EPOCHS, batch_size=32, seed=seed,
                      loss="mse", threshold=threshold)
    log = train(net, data, cfg)
    censored = log.epochs_to_threshold is None
    epochs = MIMIC_EPOCHS + 1 if censored else log.epochs_to_threshold
    return (variant, seed, epochs, censored, log.eval_loss[-1], threshold)


def run_insight3(seeds: int = 5, out_dir=None, plot: bool = False) -> dict:
    """Epochs-to-threshold for SVD-initialized vs randomly initialized nets.

    The threshold is 1.05 times the SVD-initialized network's starting
    evaluation loss (the rank-r truncation level); runs that never reach it
    are censored at epochs + 1.
    """
    jobs = [(v, s) for v in ("standard", "no-svd") for s in range(seeds)]
    rows = [{"variant": v, "seed": s, "epochs_to_threshold": e, "censored": c,
             "final_eval_loss": fl, "threshold": t}
            for v, s, e, c, fl, t in _map_jobs(_insight3_job, jobs)]
    med = {v: float(np.median([row["epochs_to_threshold"] for row in rows
                               if row["variant"] == v]))
           for v in ("standard", "no-svd")}
    summary = (f"median epochs to threshold: svd-init {med['standard']:g} vs "
               f"random-init {med['no-svd']:g} "
               f"({'faster with svd init' if med['standard'] < med['no-svd'] else 'no speedup'})")
    result = {"rows": rows, "summary": summary, "seeds": seeds,
              "median_standard": med["standard"], "median_no_svd": med["no-svd"],
              "svd_faster": med["standard"] < med["no-svd"]}
    if out_dir is not None:
        header = ["variant", "seed", "epochs_to_threshold", "censored",
                  "final_eval_loss", "threshold"]
        write_csv(os.path.join(out_dir, "insight3.csv"), header,
                  [[row[k] for k in header] for row in rows])
        if plot:
            pts = {v: [(row["seed"], row["epochs_to_threshold"])
                       for row in rows if row["variant"] == v]
                   for v in ("standard", "no-svd")}
            write_svg_lines(os.path.join(out_dir, "insight3.svg"), pts,
                            title="epochs to threshold per seed",
                            xlabel="seed", ylabel="epochs")
    return result


def run_insight(which: int, seeds: int = 5, out_dir=None, plot: bool = False) -> dict:
    if which == 1:
        return run_insight1(seeds, out_dir, plot)
    if which == 2:
        return run_insight2(seeds, out_dir, plot)
    if which == 3:
        return run_insight3(seeds, out_dir, plot)
    raise ValueError(f"unknown insight {which}; expected 1, 2, or 3")


# --- plain-text report writers -------------------------------------------------

def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_svg_lines(path, series: dict[str, list[tuple]], title: str = "",
                    xlabel: str = "", ylabel: str = "") -> None:
    """Minimal SVG polyline chart; pure text, no plotting dependency."""
    w, h, pad = 640, 400, 56
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(v):
        return h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{w/2}" y="{h-8}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="14" y="{h/2}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {h/2})">{ylabel}</text>',
             f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>']
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{w-pad+4}" y="{pad + 16*i}" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>")
    atomic_write(path, "\n".join(parts).encode("utf-8"))
