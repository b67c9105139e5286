"""Loss, optimizer, training loop, gradient-check suite and ablation runner."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteGradientError, Parameter, Tape, Tensor
from .baselines import FlowParams, generate_prior
from .data import (GridSpec, SampleWindow, SynthParams, make_windows, normalize_pwv, normalize_radar,
                   denormalize_radar, scene_pwv, synth_scene)
from .layers import (BranchState, ConvLSTMCell, Conv2DLayer, Deconv2DLayer, SharedMLP, channel_pool, conv2d,
                     deconv2d, global_pool, mlp_apply)
from .metrics import LEAD_FRAMES, THRESHOLDS, MetricsReport, evaluate, is_undefined, write_report
from .model import VARIANTS, FusionCast, InputBundle, ModelConfig, save_checkpoint
from .rpf import RPFGates, rpf_fuse

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


# -- loss and optimizer ---------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every pixel and frame."""
    return ad.mean(ad.square(ad.ew_sub(pred, ad.as_tensor(target))))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 20
    clip_norm: float = 1.0
    teacher_p: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def teacher_prob(self, epoch: int) -> float:
        """Linearly annealed from ``teacher_p`` at epoch 0 to 0 at the last epoch."""
        if self.epochs == 1:
            return 0.0
        return self.teacher_p * (1.0 - epoch / (self.epochs - 1))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def optimizer_step(params: Sequence[Parameter], state: AdamState, cfg: TrainConfig) -> float:
    """One clipped adaptive-moment update from the accumulated ``.grad`` buffers."""
    grads = {}
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in {p.name!r}")
        grads[p.name] = p.grad.copy()
    norm = clip_global_norm(grads, cfg.clip_norm)
    state.step += 1
    t = state.step
    bc1, bc2 = 1.0 - cfg.beta1 ** t, 1.0 - cfg.beta2 ** t
    for p in params:
        g = grads[p.name]
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype, copy=False)
    return norm


# -- corpus -------------------------------------------------------------------------

# epoch ranges mirroring a Mar-May train / Jun val / Feb test split (2023, UTC)
SPLITS = {
    "train": (1_677_628_800, 1_685_577_600),
    "val": (1_685_577_600, 1_688_169_600),
    "test": (1_675_209_600, 1_677_628_800),
}


@dataclass
class CorpusConfig:
    synth: SynthParams = field(default_factory=SynthParams)
    train_scenes: int = 24
    val_scenes: int = 4
    test_scenes: int = 8
    t_in: int = 4
    t_out: int = 12
    window_stride: int = 1
    prior_perturb: float = 0.0
    idw_k: int = 4


@dataclass
class Sample:
    """Normalized arrays for one window plus the physical-unit target."""

    pwv: np.ndarray
    hist: np.ndarray
    prior: np.ndarray
    target: np.ndarray
    target_mm: np.ndarray
    split: str


def window_to_sample(w: SampleWindow) -> Sample:
    return Sample(normalize_pwv(w.x_pwv.frames), normalize_radar(w.x_radar_hist.frames),
                  normalize_radar(w.x_radar_prior.frames), normalize_radar(w.target.frames),
                  np.asarray(w.target.frames, dtype=np.float64), w.split or "")


def build_corpus(seed: int, cfg: CorpusConfig) -> dict[str, list[Sample]]:
    """Synthesize scenes for each split and cut them into samples.

    Scene k of a split starts one day after scene k-1 inside the split's date
    range; scene seeds derive from ``seed`` so corpora never overlap.
    """
    out: dict[str, list[Sample]] = {"train": [], "val": [], "test": []}
    counts = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}
    ss = np.random.SeedSequence(seed)
    children = dict(zip(counts, ss.spawn(3)))
    for split, count in counts.items():
        seeds = children[split].generate_state(max(count, 1))
        for k in range(count):
            params = replace(cfg.synth, start_epoch=SPLITS[split][0] + 86_400 * k)
            scene = synth_scene(int(seeds[k]), params)
            pwv = scene_pwv(scene, k=cfg.idw_k)
            prior = (lambda hist, t_out, _s=int(seeds[k]):
                     generate_prior(hist, t_out, perturb_sigma=cfg.prior_perturb, seed=_s + int(hist.epochs[-1])))
            wins = make_windows(scene.radar, pwv, prior, cfg.t_in, cfg.t_out, SPLITS, stride=cfg.window_stride)
            out[split].extend(window_to_sample(w) for w in wins)
    return out


def batch_bundle(samples: Sequence[Sample]) -> tuple[InputBundle, np.ndarray]:
    bundle = InputBundle(np.stack([s.pwv for s in samples]), np.stack([s.hist for s in samples]),
                         np.stack([s.prior for s in samples]))
    return bundle, np.stack([s.target for s in samples])


# -- training -------------------------------------------------------------------

def model_dtype(model: FusionCast) -> np.dtype:
    return model.parameters()[0].data.dtype


def predict(model: FusionCast, samples: Sequence[Sample], batch_size: int = 8) -> list[np.ndarray]:
    """Forecasts in mm/h for each sample, computed in the model's parameter dtype."""
    preds = []
    with ad.default_dtype(model_dtype(model)):
        for i in range(0, len(samples), batch_size):
            bundle, _ = batch_bundle(samples[i:i + batch_size])
            out = model(bundle).data
            preds.extend(denormalize_radar(o) for o in out)
    return preds


def evaluate_model(model: FusionCast, samples: Sequence[Sample], thresholds=THRESHOLDS, lead_frames=LEAD_FRAMES,
                   aggregation: str = "pooled") -> MetricsReport:
    preds = predict(model, samples)
    return evaluate(preds, [s.target_mm for s in samples], thresholds, lead_frames, aggregation,
                    fingerprint=config_fingerprint(model.cfg.to_dict()))


def normalized_loss(model: FusionCast, samples: Sequence[Sample], batch_size: int = 8) -> float:
    total, n = 0.0, 0
    with ad.default_dtype(model_dtype(model)):
        for i in range(0, len(samples), batch_size):
            bundle, target = batch_bundle(samples[i:i + batch_size])
            total += float(mse_loss(model(bundle), target).data) * len(target)
            n += len(target)
    return total / max(n, 1)


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    model: FusionCast
    log: list[dict]
    best_epoch: int
    best_csi: float


LOG_FIELDS = ["epoch", "train_loss", "val_loss", "val_csi_tau1_t120"]


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_samples: Sequence[Sample],
          val_samples: Sequence[Sample], out_dir=None) -> TrainResult:
    """Seeded training loop; keeps the parameters with the best validation CSI.

    The selection score is pooled CSI at 1.0 mm/h on the last lead frame.
    Writes ``train_log.csv`` and ``checkpoint.fckp`` when ``out_dir`` is given.
    """
    if not train_samples:
        raise ValueError("no training samples")
    with ad.default_dtype(train_cfg.dtype):
        model = FusionCast(model_cfg)
        params = model.parameters()
        state = AdamState()
        rng = np.random.default_rng(train_cfg.seed)
        log, best = [], (-math.inf, math.inf)
        best_values, best_epoch, best_csi = None, 0, math.nan
        lead = model_cfg.t_out
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(len(train_samples))
            p_tf = train_cfg.teacher_prob(epoch)
            losses = []
            for i in range(0, len(order), train_cfg.batch_size):
                batch = [train_samples[j] for j in order[i:i + train_cfg.batch_size]]
                bundle, target = batch_bundle(batch)
                model.zero_grad()
                with Tape() as tape:
                    loss = mse_loss(model(bundle, target, p_tf, rng), target)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
                optimizer_step(params, state, train_cfg)
                losses.append(value * len(batch))
            train_loss = sum(losses) / len(train_samples)
            if val_samples:
                val_loss = normalized_loss(model, val_samples)
                rep = evaluate_model(model, val_samples, thresholds=(1.0,), lead_frames=(lead,))
                val_csi = rep.csi[(1.0, lead)]
            else:
                val_loss, val_csi = train_loss, math.nan
            key = (-1.0 if is_undefined(val_csi) else val_csi, -val_loss)
            if best_values is None or key > best:
                best = key
                best_values = [p.data.copy() for p in params]
                best_epoch, best_csi = epoch, val_csi
            log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_csi_tau1_t120": val_csi})
            logger.info("epoch %d train %.6f val %.6f csi %.4f", epoch, train_loss, val_loss, val_csi)
            if out_dir is not None and train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(out_dir) / f"epoch{epoch + 1:03d}.fckp", params)
        for p, v in zip(params, best_values):
            p.data[...] = v
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "train_log.csv", log)
        save_checkpoint(out / "checkpoint.fckp", params)
    return TrainResult(model, log, best_epoch, best_csi)


def _fmt(x: float) -> str:
    return "NA" if is_undefined(x) else f"{x:.8f}"


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in log:
            w.writerow([row["epoch"], _fmt(row["train_loss"]), _fmt(row["val_loss"]), _fmt(row["val_csi_tau1_t120"])])


# -- ablation -----------------------------------------------------------------------

@dataclass
class PlanEntry:
    variant: str
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentPlan:
    entries: list[PlanEntry]
    model: ModelConfig
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        names = [e.variant for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"variants repeat in plan: {names}")
        for v in names:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")


def desk_model_config(**overrides) -> ModelConfig:
    """Small channel plan used for the ablation regime on a 32x32 grid."""
    base = dict(grid=32, t_in=4, t_out=12, enc_channels=(8, 16), prior_channels=(8, 24), hidden=16,
                prior_hidden=24, proj_channels=16, dec_channels=(8, 16), head_channels=(8, 8))
    base.update(overrides)
    return ModelConfig(**base)


def default_plan(seeds=(0, 1, 2, 3, 4), variants=VARIANTS, train_cfg: TrainConfig | None = None,
                 corpus: CorpusConfig | None = None) -> ExperimentPlan:
    tc = train_cfg or TrainConfig(epochs=6, batch_size=4, lr=3e-3, dtype="float32")
    return ExperimentPlan([PlanEntry(v, tc) for v in variants], desk_model_config(), corpus or CorpusConfig(),
                          tuple(seeds))


@dataclass
class AblationResult:
    reports: dict[str, list[MetricsReport]]
    seeds: tuple[int, ...]

    def mean_se(self, variant: str, tau: float, lead: int) -> tuple[float, float]:
        vals = np.array([r.csi[(tau, lead)] for r in self.reports[variant]], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        if not len(vals):
            return math.nan, math.nan
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        return float(vals.mean()), se

    def paired_diff(self, a: str, b: str, tau: float, lead: int) -> tuple[float, float]:
        """Mean and standard error of per-seed CSI differences a - b."""
        d = np.array([ra.csi[(tau, lead)] - rb.csi[(tau, lead)]
                      for ra, rb in zip(self.reports[a], self.reports[b])], dtype=np.float64)
        d = d[np.isfinite(d)]
        if not len(d):
            return math.nan, math.nan
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0


def run_ablation(plan: ExperimentPlan, out_dir=None, progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train and test every variant on identical corpora and seeds."""
    reports: dict[str, list[MetricsReport]] = {e.variant: [] for e in plan.entries}
    for seed in plan.seeds:
        corpus = build_corpus(seed, replace(plan.corpus, t_in=plan.model.t_in, t_out=plan.model.t_out))
        for entry in plan.entries:
            t0 = time.time()
            mcfg = replace(plan.model, variant=entry.variant, seed=seed)
            tcfg = replace(entry.train, seed=seed)
            run_dir = Path(out_dir) / entry.variant / f"seed{seed}" if out_dir is not None else None
            res = train(mcfg, tcfg, corpus["train"], corpus["val"], run_dir)
            leads = tuple(sorted({k for k in LEAD_FRAMES if k <= mcfg.t_out} | {mcfg.t_out}))
            rep = evaluate_model(res.model, corpus["test"], lead_frames=leads)
            reports[entry.variant].append(rep)
            if run_dir is not None:
                write_report(rep, run_dir, entry.variant)
            if progress:
                progress(f"seed {seed} {entry.variant}: csi(1.0,t{10 * leads[-1]})={rep.csi[(1.0, leads[-1])]:.4f} "
                         f"({time.time() - t0:.1f}s)")
    result = AblationResult(reports, tuple(plan.seeds))
    if out_dir is not None:
        write_ablation(result, out_dir)
    return result


def write_ablation(result: AblationResult, out_dir) -> None:
    out = Path(out_dir)
    for variant, reps in result.reports.items():
        mean_rep = _mean_report(reps)
        write_report(mean_rep, out / variant, variant)
    first = next(iter(result.reports.values()))[0]
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["variant", "seeds"]
        for tau in first.thresholds:
            for lead in first.lead_frames:
                head += [f"csi_tau{tau:g}_t{lead * 10}_mean", f"csi_tau{tau:g}_t{lead * 10}_se"]
        w.writerow(head)
        for variant in result.reports:
            row = [variant, " ".join(str(s) for s in result.seeds)]
            for tau in first.thresholds:
                for lead in first.lead_frames:
                    m, s = result.mean_se(variant, tau, lead)
                    row += [_fmt6(m), _fmt6(s)]
            w.writerow(row)


def _fmt6(x: float) -> str:
    return "NA" if is_undefined(x) else f"{x:.6f}"


def _mean_report(reps: list[MetricsReport]) -> MetricsReport:
    first = reps[0]
    csi = {}
    for key in first.csi:
        vals = [r.csi[key] for r in reps if not is_undefined(r.csi[key])]
        csi[key] = float(np.mean(vals)) if vals else math.nan
    return MetricsReport(first.thresholds, first.lead_frames, csi, {}, float(np.mean([r.mae for r in reps])),
                         float(np.mean([r.rmse for r in reps])), sum(r.n_samples for r in reps), "seed-mean",
                         first.fingerprint, [k for k, v in csi.items() if is_undefined(v)])


# -- gradient check suite -----------------------------------------------------------

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    worst_param: str
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error < self.tol


def gradcheck_model_config(variant: str = "full") -> ModelConfig:
    """16x16, T_in=2, T_out=2 model whose every parameter tensor has <= 512 entries."""
    return ModelConfig(grid=16, t_in=2, t_out=2, enc_channels=(2, 3), prior_channels=(2, 4), hidden=3,
                       prior_hidden=3, proj_channels=3, dec_channels=(2, 3), head_channels=(3, 2),
                       variant=variant, seed=11)


def _layer_checks(rng: np.random.Generator) -> list[tuple[str, Callable, list[Parameter]]]:
    x = Parameter(rng.normal(size=(2, 5, 5)), "x")
    conv = Conv2DLayer(2, 3, 3, stride=2, padding=1, rng=rng, name="conv")
    dec = Deconv2DLayer(2, 2, 4, stride=2, padding=1, rng=rng, name="deconv")
    mlp = SharedMLP(4, rng=rng, name="mlp")
    v = Parameter(rng.normal(size=4), "v")
    cell = ConvLSTMCell(2, 2, rng=rng, name="cell")
    xs = Parameter(rng.normal(size=(2, 4, 4)), "x_seq")
    h0 = Parameter(rng.normal(size=(2, 4, 4)), "h0")
    c0 = Parameter(rng.normal(size=(2, 4, 4)), "c0")
    cp = Parameter(rng.normal(size=(3, 4, 4)), "pool_in")
    gates = RPFGates(4, rng=rng)
    pwv_h = Parameter(rng.normal(size=(3, 4, 4)), "pwv.h")
    pwv_c = Parameter(rng.normal(size=(3, 4, 4)), "pwv.c")
    rad_h = Parameter(rng.normal(size=(4, 4, 4)), "radar.h")
    rad_c = Parameter(rng.normal(size=(4, 4, 4)), "radar.c")
    w_out = rng.normal(size=(4, 4, 4))

    def sq(t):
        return ad.sum_(ad.square(t))

    def lstm():
        h, c = cell(xs, h0, c0)
        return ad.ew_add(sq(h), sq(c))

    def pools():
        a, m = global_pool(cp)
        return ad.ew_add(sq(channel_pool(cp)), ad.ew_add(sq(a), sq(m)))

    def rpf():
        fused = rpf_fuse(BranchState(pwv_h, pwv_c), BranchState(rad_h, rad_c), gates)
        return ad.ew_add(ad.sum_(ad.ew_mul(fused.h, Tensor(w_out))), sq(fused.c))

    return [
        ("conv2d", lambda: sq(conv2d(x, conv)), [x] + conv.parameters()),
        ("deconv2d", lambda: sq(deconv2d(x, dec)), [x] + dec.parameters()),
        ("mlp", lambda: sq(mlp_apply(v, mlp)), [v] + mlp.parameters()),
        ("convlstm_step", lstm, [xs, h0, c0] + cell.parameters()),
        ("pooling", pools, [cp]),
        ("rpf", rpf, [pwv_h, pwv_c, rad_h, rad_c] + gates.parameters()),
    ]


def _model_check(variant: str, rng: np.random.Generator):
    cfg = gradcheck_model_config(variant)
    model = FusionCast(cfg)
    n = cfg.grid
    bundle = InputBundle(rng.random((cfg.t_in, n, n)), rng.random((cfg.t_in, n, n)), rng.random((cfg.t_out, n, n)))
    target = rng.random((cfg.t_out, n, n))
    # zero biases put ReLU inputs exactly on the kink wherever a receptive field is all zeros
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data[...] += rng.normal(0.0, 0.1, size=p.shape)
    model.decoder.out.bias.data[...] += 0.5
    return lambda: mse_loss(model(bundle), target), model.parameters()


def gradcheck_suite(variants: Sequence[str] = ("full",), eps: float = 1e-5, seed: int = 0,
                    model_coords: int | None = None,
                    spot_variants: Sequence[str] = ("no_pwv", "no_prior", "no_rpf_concat", "rpf_concat_fusion"),
                    spot_coords: int = 8) -> list[CheckResult]:
    """Finite-difference checks of every layer and the end-to-end model (float64).

    ``variants`` are checked on ``model_coords`` coordinates per parameter (all
    when None); ``spot_variants`` on ``spot_coords`` sampled coordinates.
    """
    results = []
    with ad.default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for name, f, params in _layer_checks(rng):
            t0 = time.time()
            err, worst = ad.finite_difference_check(f, params, eps)
            results.append(CheckResult(name, err, worst, LAYER_TOL, time.time() - t0))
        for v in variants:
            t0 = time.time()
            f, params = _model_check(v, rng)
            err, worst = ad.finite_difference_check(f, params, eps, max_coords=model_coords, seed=seed)
            results.append(CheckResult(f"model[{v}]", err, worst, MODEL_TOL, time.time() - t0))
        for v in spot_variants:
            t0 = time.time()
            f, params = _model_check(v, rng)
            err, worst = ad.finite_difference_check(f, params, eps, max_coords=spot_coords, seed=seed)
            results.append(CheckResult(f"model[{v}] spot", err, worst, MODEL_TOL, time.time() - t0))
    return results
