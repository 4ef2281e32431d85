"""Experiment orchestration: training the primitives, running trials, metrics.

A *mode* selects how the correction and final primitives get their context:

``pc``    corridor offset for ``cor`` and post-correction object x for ``post``
``ae``    autoencoder latents of the images taken after ``pre`` and ``cor``
``mono``  one network over the concatenated demonstration, corridor context
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import demonstrator as dm
from . import sim
from .cnmp import CnmpModel, CnmpTrainer, count_parameters, generate_trajectory, width_for_budget
from .context_ae import AeModel, train_ae
from .dataset import phase_values
from .errors import ContractViolation, CormpError, DataError
from .normalization import MinMax, ZScore
from .trajectory import uniform_grid

log = logging.getLogger(__name__)

MODES = ("pc", "ae", "mono")
MODE_LABELS = {"pc": "PerfectContext", "ae": "AutoencoderContext", "mono": "MonolithicBaseline"}
PHASES = ("pre", "cor", "post")

# Reference values (cm): per-MP (mean, max) trajectory errors and task success counts.
REFERENCE_ERRORS = {
    "pc": {"cor": (0.80, 1.45), "post": (1.69, 3.19)},
    "ae": {"cor": (0.80, 0.99), "post": (2.64, 4.83)},
    "mono": {"cor": (1.30, 1.92), "post": (5.75, 7.24)},
}
REFERENCE_SUCCESS = {"pc": 24, "ae": 25, "mono": 17}
ABORTED = "aborted"


@dataclass(frozen=True)
class ExperimentConfig:
    context_mode: str = "pc"
    budget: int = 200_000
    seeds: tuple = (0, 1, 2)
    dataset_path: str = None
    lr: float = 1e-4
    obs_max: int = 5
    n_targets: int = 1
    width: int = 128
    encoder_layers: int = 3
    decoder_layers: int = 4
    ae_epochs: int = 70
    ae_lr: float = 3e-4
    ae_batch_size: int = 16
    n_points: int = dm.N_POINTS

    def __post_init__(self):
        if self.context_mode not in MODES:
            raise ContractViolation(f"context_mode must be one of {MODES}, got {self.context_mode!r}")
        if int(self.budget) < 1:
            raise ContractViolation("budget must be a positive number of updates")
        if len(self.seeds) == 0:
            raise ContractViolation("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "budget", int(self.budget))

    def segmented_parameter_count(self):
        """Sum of the three perfect-context primitives' parameter counts."""
        kw = dict(width=self.width, encoder_layers=self.encoder_layers,
                  decoder_layers=self.decoder_layers)
        return (count_parameters(3, 0, **kw) + count_parameters(3, 1, **kw)
                + count_parameters(3, 1, **kw))

    def monolithic_width(self):
        return width_for_budget(self.segmented_parameter_count(), 3, 1,
                                self.encoder_layers, self.decoder_layers)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown experiment settings: {sorted(unknown)}")
        data = dict(data)
        if "seeds" in data:
            data["seeds"] = tuple(data["seeds"])
        return cls(**data)


def stream(seed, name, purpose=0):
    """Independent generator for one (seed, model name, purpose) triple."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(purpose)])


# -- primitives ------------------------------------------------------------------

@dataclass
class Primitive:
    """A trained CNMP plus the normalisation needed to run it in world units."""

    name: str
    model: CnmpModel
    values: ZScore
    context: MinMax = None
    relative: bool = False
    curve: list = field(default_factory=list)

    def normalized_context(self, raw):
        if self.context is None:
            return np.zeros(0)
        return self.context.apply(np.atleast_1d(np.asarray(raw, dtype=np.float64)))

    def generate(self, start, raw_context, grid):
        """World-frame path starting at ``start`` and its predictive std.

        The model is conditioned on ``start`` at t=0; the residual between
        ``start`` and the predicted first point is faded out linearly so the
        path begins exactly at the gripper.
        """
        start = np.asarray(start, dtype=np.float64)
        origin = start if self.relative else np.zeros_like(start)
        cond = np.concatenate([[0.0], self.values.apply(start - origin)])[None]
        mu, sigma = generate_trajectory(self.model, cond, self.normalized_context(raw_context), grid)
        path = self.values.invert(mu) + origin
        path += np.outer(1.0 - grid, start - path[0])
        return path, self.values.invert_std(sigma)

    def metadata(self):
        return {"name": self.name, "values": self.values.to_dict(),
                "context": None if self.context is None else self.context.to_dict(),
                "relative": self.relative}

    def save(self, path, seed, extra=None):
        meta = self.metadata()
        meta.update(extra or {})
        self.model.save(path, seed=seed, metadata=meta)

    @classmethod
    def load(cls, path):
        model, header = CnmpModel.load(path)
        meta = header.get("metadata", {})
        try:
            ctx = meta["context"]
            prim = cls(meta["name"], model, ZScore.from_dict(meta["values"]),
                       None if ctx is None else MinMax.from_dict(ctx), bool(meta["relative"]))
        except KeyError as exc:
            raise DataError(f"{path}: checkpoint lacks primitive metadata {exc}") from None
        return prim, header


def _points(t, values, stats):
    return np.column_stack([t, stats.apply(values)])


def _contexts(dataset, phase, mode, ae):
    """Raw context per demonstration (rows) for ``phase`` in ``mode``."""
    demos = dataset.demos
    if phase == "pre":
        return np.zeros((len(demos), 0))
    if mode == "ae":
        which = 0 if phase == "cor" else 1
        return ae.encode(np.stack([d.images[which] for d in demos]))
    if phase == "post":
        return np.array([[d.context_object] for d in demos])
    return np.array([[d.context_corridor] for d in demos])


def prepare_training_set(dataset, phase, mode, ae=None):
    """Normalised ``(train, validation, value_stats, context_stats)``.

    ``train`` and ``validation`` are lists of ``(points, context)`` with
    ``points`` the ``(N, 4)`` array ``[t, z-scored xyz]``.
    """
    values = dataset.stats(phase)
    raw = _contexts(dataset, phase, mode, ae)
    ctx_stats = None
    if raw.shape[1]:
        if mode == "ae":
            ctx_stats = MinMax.fit(raw[dataset.train_indices])
        else:
            key = "context_object" if phase == "post" else "context_corridor"
            ctx_stats = dataset.stats(key)
    ctx = raw if ctx_stats is None else ctx_stats.apply(raw)

    def pack(indices):
        out = []
        for i in indices:
            d = dataset.demos[i]
            traj = d.full if phase == "full" else getattr(d, phase)
            out.append((_points(traj.t, phase_values(d, phase), values), ctx[i]))
        return out

    return pack(dataset.train_indices), pack(dataset.validation_indices), values, ctx_stats


def train_cnmp(name, train, validation, values, context, config, seed, width=None,
               relative=False, progress=None):
    """Train one primitive for ``config.budget`` updates.

    The validation NLL is measured on a fixed sample every ``budget/20``
    updates and stored as ``curve`` rows ``(step, train_loss, val_nll)``.
    """
    context_dim = 0 if context is None else len(context.lo)
    model = CnmpModel(3, context_dim, width or config.width, config.encoder_layers,
                      config.decoder_layers, rng=stream(seed, name, 0))
    trainer = CnmpTrainer(model, lr=config.lr, obs_max=config.obs_max, n_targets=config.n_targets)
    rng = stream(seed, name, 1)
    every = max(1, config.budget // 20)
    curve, window = [], []
    for step in range(1, config.budget + 1):
        window.append(trainer.train_step(train, rng))
        if step % every == 0 or step == config.budget:
            val = trainer.evaluate(validation or train, stream(seed, name, 2))
            curve.append((step, float(np.mean(window)), float(val)))
            window = []
            if progress is not None:
                progress(name, step, curve[-1])
    return Primitive(name, model, values, context, relative, curve)


@dataclass
class ModelSet:
    """Everything needed to run one seed of one mode."""

    mode: str
    seed: int
    primitives: dict
    ae: AeModel = None

    @property
    def parameter_count(self):
        return sum(p.model.parameter_count for p in self.primitives.values())


def train_context_ae(dataset, config, seed, callback=None):
    ae = AeModel(rng=stream(seed, "ae", 0))
    history = train_ae(ae, dataset.images(), stream(seed, "ae", 1), epochs=config.ae_epochs,
                       lr=config.ae_lr, batch_size=config.ae_batch_size, callback=callback)
    return ae, history


def _primitive_name(phase, mode):
    return "pre" if phase == "pre" else f"{phase}/{mode}"


def train_segmented(dataset, config, seed, ae=None, pre=None, progress=None):
    """Train the pre, cor and post primitives for one seed.

    ``pre`` is context free and identical across modes, so a primitive
    trained earlier for the same seed can be passed in and reused.
    """
    mode = config.context_mode
    if mode == "mono":
        raise ContractViolation("train_segmented needs context_mode 'pc' or 'ae'")
    if mode == "ae" and ae is None:
        raise ContractViolation("autoencoder context requires a trained autoencoder")
    prims = {}
    for phase in PHASES:
        if phase == "pre" and pre is not None:
            prims["pre"] = pre
            continue
        train, val, values, ctx = prepare_training_set(dataset, phase, mode, ae)
        prims[phase] = train_cnmp(_primitive_name(phase, mode), train, val, values, ctx, config,
                                  seed, relative=(phase == "cor"), progress=progress)
    return ModelSet(mode, seed, prims, ae)


def train_monolithic(dataset, config, seed, progress=None):
    """One CNMP over the full demonstration, parameter-matched to the segmented sum."""
    train, val, values, ctx = prepare_training_set(dataset, "full", "pc")
    prim = train_cnmp("full", train, val, values, ctx, config, seed,
                      width=config.monolithic_width(), progress=progress)
    return ModelSet("mono", seed, {"full": prim})


def train_all(dataset, config, progress=None, ae_callback=None):
    """Train every seed of ``config.context_mode``; returns ``(model_sets, ae_history)``."""
    ae, history = None, []
    if config.context_mode == "ae":
        ae, history = train_context_ae(dataset, config, config.seeds[0], ae_callback)
    sets = []
    for seed in config.seeds:
        if config.context_mode == "mono":
            sets.append(train_monolithic(dataset, config, seed, progress))
        else:
            sets.append(train_segmented(dataset, config, seed, ae, progress=progress))
    return sets, history


# -- persistence of trained model sets ----------------------------------------------

MANIFEST = "manifest.json"


def save_model_sets(sets, out_dir, config, dataset_fingerprint):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"dataset_fingerprint": dataset_fingerprint, "mode": config.context_mode}
    ae = sets[0].ae if sets else None
    if ae is not None:
        latent_bounds = {k: p.context.to_dict() for k, p in sets[0].primitives.items()
                         if p.context is not None}
        ae.save(out / "ae.ckpt", seed=config.seeds[0],
                metadata=dict(extra, latent_bounds=latent_bounds))
    for ms in sets:
        d = out / f"seed_{ms.seed}"
        d.mkdir(exist_ok=True)
        for key, prim in ms.primitives.items():
            prim.save(d / f"{key}.ckpt", ms.seed, extra)
    manifest = {"format": "cormp-models", "format_version": 1, "mode": config.context_mode,
                "seeds": [ms.seed for ms in sets], "dataset_fingerprint": dataset_fingerprint,
                "parameter_counts": {str(ms.seed): ms.parameter_count for ms in sets},
                "segmented_parameter_count": config.segmented_parameter_count()}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_model_sets(models_dir, dataset_fingerprint=None):
    root = Path(models_dir)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"{root} holds no trained models (missing {MANIFEST})")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "cormp-models" or manifest.get("format_version") != 1:
        raise DataError(f"{root}: unsupported model directory format")
    if dataset_fingerprint is not None and manifest["dataset_fingerprint"] != dataset_fingerprint:
        raise DataError(f"{root}: models were trained on a different dataset "
                        f"({manifest['dataset_fingerprint'][:12]} vs {dataset_fingerprint[:12]})")
    mode = manifest["mode"]
    ae = None
    if mode == "ae":
        ae, _ = AeModel.load(root / "ae.ckpt")
    keys = ("full",) if mode == "mono" else PHASES
    sets = []
    for seed in manifest["seeds"]:
        prims = {k: Primitive.load(root / f"seed_{seed}" / f"{k}.ckpt")[0] for k in keys}
        sets.append(ModelSet(mode, int(seed), prims, ae))
    return sets, manifest


# -- trial execution ------------------------------------------------------------------

@dataclass(frozen=True)
class TrialResult:
    seed: int
    trial: int
    corridor_offset: float
    expected_kind: str
    predicted_kind: str
    success: bool
    cor_error_mean: float
    cor_error_max: float
    post_error_mean: float
    post_error_max: float
    cor_dx: float = math.nan  # net x-displacement of the generated cor-MP, metres
    cause: str = ""

    @property
    def executed(self):
        """False when the episode was cut short by a simulator or model error."""
        return not self.cause.startswith(ABORTED)


def trajectory_error(predicted, ground_truth):
    """Mean and max pointwise Euclidean distance in cm.

    Accepts :class:`~cormp.trajectory.Trajectory` objects or plain arrays;
    both must live on the same time grid.
    """
    p_t = getattr(predicted, "t", None)
    g_t = getattr(ground_truth, "t", None)
    p = np.asarray(getattr(predicted, "values", predicted), dtype=np.float64)
    g = np.asarray(getattr(ground_truth, "values", ground_truth), dtype=np.float64)
    if p.shape != g.shape:
        raise ContractViolation(f"trajectory grids differ: {p.shape} vs {g.shape}")
    if p_t is not None and g_t is not None and not np.array_equal(p_t, g_t):
        raise ContractViolation("trajectories are sampled on different time grids")
    d = np.linalg.norm(p - g, axis=1) * 100.0
    return float(d.mean()), float(d.max())


def observe(models, state, phase, config):
    """Raw context for ``phase`` as the robot would perceive it in ``state``."""
    if models.mode == "ae":
        return models.ae.encode(dm.quantize(sim.render(state, config)))
    if phase == "post":
        return np.array([state.object_center[0]])
    return np.array([state.corridor_offset])


@dataclass
class TrialTrace:
    """Generated and ground-truth cor/post paths of one trial (world frame)."""

    predicted: dict = field(default_factory=dict)
    ground_truth: dict = field(default_factory=dict)


def execute_trial(models, scene, trial=0, config=sim.WorldConfig(), n_points=dm.N_POINTS,
                  trace=None):
    """Run one closed-loop episode on ``scene`` and score it against the expert."""
    gt = dm.demonstrate(scene, config, n_points)
    tau = config.dead_band
    grid = uniform_grid(n_points)
    preds, cause = {}, ""
    state = scene
    x_before = x_after = None
    try:
        if models.mode == "mono":
            full_grid = np.linspace(0.0, 1.0, 3 * n_points)
            path, _ = models.primitives["full"].generate(state.gripper, [scene.corridor_offset],
                                                         full_grid)
            chunks = dict(zip(PHASES, np.split(path, 3)))
            for phase in PHASES:
                if phase == "cor":
                    x_before = state.object_center[0]
                preds[phase] = chunks[phase]
                state = sim.execute(state, chunks[phase], config)
                if phase == "cor":
                    x_after = state.object_center[0]
        else:
            for phase in PHASES:
                prim = models.primitives[phase]
                ctx = None if phase == "pre" else observe(models, state, phase, config)
                if phase == "cor":
                    x_before = state.object_center[0]
                preds[phase], _ = prim.generate(state.gripper, ctx, grid)
                state = sim.execute(state, preds[phase], config)
                if phase == "cor":
                    x_after = state.object_center[0]
    except CormpError as exc:
        cause = f"{ABORTED}: {type(exc).__name__}: {exc}"
    finished = not cause
    success = finished and sim.check_success(state, config)
    if finished and not success:
        cause = "corridor contact" if state.contact_with_corridor else "object short of midpoint"
    predicted_kind = (dm.correction_kind(x_after - x_before, tau) if x_after is not None
                      else "undetermined")
    errs = {}
    for phase in ("cor", "post"):
        errs[phase] = (trajectory_error(preds[phase], getattr(gt, phase).values)
                       if phase in preds else (math.nan, math.nan))
    cor_dx = float(preds["cor"][-1, 0] - preds["cor"][0, 0]) if "cor" in preds else math.nan
    if trace is not None:
        trace.predicted.update(preds)
        trace.ground_truth.update({p: getattr(gt, p).values for p in PHASES})
    return TrialResult(models.seed, trial, float(scene.corridor_offset), gt.correction_kind,
                       predicted_kind, bool(success), *errs["cor"], *errs["post"], cor_dx, cause)


def evaluate(models, scenes, config=sim.WorldConfig(), threads=1, n_points=dm.N_POINTS,
             traces=None):
    """Run every scene; trials are independent and may run on a thread pool."""
    if traces is not None:
        traces.extend(TrialTrace() for _ in scenes)

    def run(i):
        return execute_trial(models, scenes[i], i, config, n_points,
                             None if traces is None else traces[i])

    if threads <= 1:
        return [run(i) for i in range(len(scenes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, range(len(scenes))))


# -- metrics ----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Aggregates over trials, averaged across seeds.

    ``kinds`` rows hold ``kind, n, decision_match, success`` (percent).
    ``errors`` maps ``cor``/``post`` to ``(mean, max)`` in cm, where ``mean``
    averages the per-trial mean errors and ``max`` is the largest per-trial
    mean error.
    """

    mode: str
    seeds: list
    kinds: list
    errors: dict
    per_seed: dict
    trials: list

    @property
    def success_count(self):
        return float(np.mean([s["success"] for s in self.per_seed.values()]))

    @property
    def match_count(self):
        return float(np.mean([s["match"] for s in self.per_seed.values()]))


def _nan_stats(values):
    vals = np.array([v for v in values if not math.isnan(v)])
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.max())


def report(results, mode="pc"):
    """Aggregate :class:`TrialResult` rows (possibly several seeds)."""
    if not results:
        raise ContractViolation("report needs at least one trial")
    seeds = sorted({r.seed for r in results})
    per_seed, kind_rows, err_rows = {}, {k: [] for k in dm.KINDS}, []
    for s in seeds:
        rs = [r for r in results if r.seed == s]
        per_seed[s] = {
            "n": len(rs),
            "success": sum(r.success for r in rs),
            "match": sum(r.predicted_kind == r.expected_kind for r in rs),
        }
        for kind in dm.KINDS:
            sub = [r for r in rs if r.expected_kind == kind]
            if sub:
                kind_rows[kind].append((len(sub),
                                        100.0 * np.mean([r.predicted_kind == kind for r in sub]),
                                        100.0 * np.mean([r.success for r in sub])))
        cor = _nan_stats([r.cor_error_mean for r in rs])
        post = _nan_stats([r.post_error_mean for r in rs])
        per_seed[s].update(cor_mean=cor[0], cor_max=cor[1], post_mean=post[0], post_max=post[1])
        err_rows.append((cor, post))
    kinds = []
    for kind in dm.KINDS:
        rows = kind_rows[kind]
        if rows:
            kinds.append({"kind": kind, "n": rows[0][0],
                          "decision_match": float(np.mean([r[1] for r in rows])),
                          "success": float(np.mean([r[2] for r in rows]))})
    errors = {
        "cor": tuple(float(np.mean([e[0][i] for e in err_rows])) for i in range(2)),
        "post": tuple(float(np.mean([e[1][i] for e in err_rows])) for i in range(2)),
    }
    return MetricsReport(mode, seeds, kinds, errors, per_seed, list(results))


TRIAL_FIELDS = [f.name for f in fields(TrialResult)]


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trials_csv(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_FIELDS)
        for r in results:
            writer.writerow([_cell(getattr(r, k)) for k in TRIAL_FIELDS])


def read_trials_csv(path):
    types = {f.name: f.type for f in fields(TrialResult)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k in TRIAL_FIELDS:
                t = types[k]
                if t == "bool":
                    vals[k] = row[k] == "1"
                elif t == "int":
                    vals[k] = int(row[k])
                elif t == "float":
                    vals[k] = float(row[k])
                else:
                    vals[k] = row[k]
            out.append(TrialResult(**vals))
    return out


def write_traces_csv(traces_by_seed, path):
    """Persist cor/post paths as ``seed,trial,source,phase,index,x,y,z`` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "trial", "source", "phase", "index", "x", "y", "z"])
        for seed in sorted(traces_by_seed):
            for trial, tr in enumerate(traces_by_seed[seed]):
                for source, paths in (("predicted", tr.predicted), ("ground_truth", tr.ground_truth)):
                    for phase in ("cor", "post"):
                        if phase not in paths:
                            continue
                        for i, p in enumerate(paths[phase]):
                            writer.writerow([seed, trial, source, phase, i] + [repr(float(v)) for v in p])


def read_traces_csv(path):
    acc = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["seed"]), int(row["trial"]))
            paths = acc.setdefault(key, TrialTrace())
            target = paths.predicted if row["source"] == "predicted" else paths.ground_truth
            target.setdefault(row["phase"], []).append(
                [float(row["x"]), float(row["y"]), float(row["z"])])
    out = {}
    for (seed, trial), tr in sorted(acc.items()):
        tr.predicted = {k: np.array(v) for k, v in tr.predicted.items()}
        tr.ground_truth = {k: np.array(v) for k, v in tr.ground_truth.items()}
        seq = out.setdefault(seed, [])
        while len(seq) < trial:
            seq.append(TrialTrace())
        seq.append(tr)
    return out


def _fmt(v, digits=2):
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def summary_text(rep):
    buf = io.StringIO()
    label = MODE_LABELS.get(rep.mode, rep.mode)
    buf.write(f"{label}: {len(rep.seeds)} seed(s) {rep.seeds}\n\n")
    buf.write(f"{'expected':<14}{'n':>4}{'match %':>10}{'success %':>11}\n")
    for row in rep.kinds:
        buf.write(f"{row['kind']:<14}{row['n']:>4}{row['decision_match']:>10.1f}"
                  f"{row['success']:>11.1f}\n")
    buf.write(f"\nmean over seeds: success {rep.success_count:.2f}/"
              f"{rep.per_seed[rep.seeds[0]]['n']}, decision match {rep.match_count:.2f}\n")
    for s in rep.seeds:
        ps = rep.per_seed[s]
        buf.write(f"  seed {s}: success {ps['success']}/{ps['n']}, match {ps['match']}/{ps['n']}\n")
    ref_vals = REFERENCE_ERRORS.get(rep.mode)
    buf.write(f"\n{'MP':<6}{'mean cm':>9}{'max cm':>9}")
    buf.write(f"{'ref mean':>10}{'ref max':>9}\n" if ref_vals else "\n")
    for mp in ("cor", "post"):
        m, x = rep.errors[mp]
        buf.write(f"{mp:<6}{_fmt(m):>9}{_fmt(x):>9}")
        buf.write(f"{ref_vals[mp][0]:>10.2f}{ref_vals[mp][1]:>9.2f}\n" if ref_vals else "\n")
    failed = [r for r in rep.trials if not r.success]
    if failed:
        buf.write("\nfailed trials:\n")
        for r in failed:
            buf.write(f"  seed {r.seed} trial {r.trial:2d} offset {r.corridor_offset * 100:+.2f} cm "
                      f"{r.expected_kind}->{r.predicted_kind}: {r.cause}\n")
    return buf.getvalue()


def _svg_overlay(traces, results, title):
    """Top-down (x, y) view of predicted vs ground-truth cor-MPs."""
    w, h, pad = 520, 420, 40
    colors = {"push": "#c0392b", "no_correction": "#7f8c8d", "pull": "#2471a3"}
    pts = [p for tr in traces for src in (tr.predicted, tr.ground_truth) if "cor" in src
           for p in src["cor"][:, :2]]
    if not pts:
        pts = [(0.0, 0.0), (1e-3, 1e-3)]
    pts = np.array(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-3)
    scale = min((w - 2 * pad) / span[0], (h - 2 * pad) / span[1])

    def xy(p):
        return (pad + (p[0] - lo[0]) * scale, h - pad - (p[1] - lo[1]) * scale)

    def poly(path, color, dash):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in map(xy, path[:, :2]))
        extra = ' stroke-dasharray="5,3"' if dash else ""
        return (f'<polyline points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="1.2"{extra}/>\n')

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}">\n',
           f'<rect width="{w}" height="{h}" fill="white"/>\n',
           f'<text x="{pad}" y="20" font-family="sans-serif" font-size="13">{title}</text>\n',
           f'<text x="{pad}" y="{h - 10}" font-family="sans-serif" font-size="11">'
           f'x (solid: expert, dashed: generated)</text>\n']
    for tr, r in zip(traces, results):
        color = colors.get(r.expected_kind, "black")
        if "cor" in tr.ground_truth:
            out.append(poly(tr.ground_truth["cor"], color, False))
        if "cor" in tr.predicted:
            out.append(poly(tr.predicted["cor"], color, True))
    out.append("</svg>\n")
    return "".join(out)


def errors_rows(rep):
    ref_vals = REFERENCE_ERRORS.get(rep.mode, {})
    rows = []
    for mp in ("cor", "post"):
        ref = ref_vals.get(mp, (math.nan, math.nan))
        rows.append([rep.mode, mp, _fmt(rep.errors[mp][0], 4), _fmt(rep.errors[mp][1], 4),
                     _fmt(ref[0]), _fmt(ref[1])])
    return rows


def write_report(rep, out_dir, traces_by_seed=None):
    """Write trials.csv, summary.csv, errors.csv, report.txt and SVG overlays.

    Everything except the traces themselves is derived from ``rep``, so
    :func:`regenerate_report` reproduces the files byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trials_csv(rep.trials, out / "trials.csv")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "expected_kind", "n", "decision_match_pct", "task_success_pct"])
        for row in rep.kinds:
            writer.writerow([rep.mode, row["kind"], row["n"], f"{row['decision_match']:.1f}",
                             f"{row['success']:.1f}"])
    with open(out / "errors.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "mp", "mean_cm", "max_cm", "reference_mean_cm", "reference_max_cm"])
        writer.writerows(errors_rows(rep))
    (out / "report.txt").write_text(summary_text(rep))
    if traces_by_seed:
        write_traces_csv(traces_by_seed, out / "traces.csv")
        plots = out / "plots"
        plots.mkdir(exist_ok=True)
        for seed, traces in sorted(traces_by_seed.items()):
            rs = sorted((r for r in rep.trials if r.seed == seed), key=lambda r: r.trial)
            title = f"{MODE_LABELS.get(rep.mode, rep.mode)} seed {seed}: cor-MP, top view"
            (plots / f"cor_seed_{seed}.svg").write_text(_svg_overlay(traces, rs, title))


def regenerate_report(out_dir, mode):
    """Rebuild every report artefact from the persisted trial and trace CSVs."""
    out = Path(out_dir)
    results = read_trials_csv(out / "trials.csv")
    traces = read_traces_csv(out / "traces.csv") if (out / "traces.csv").is_file() else None
    rep = report(results, mode)
    write_report(rep, out, traces)
    return rep


def run_evaluation(sets, scenes, out_dir=None, config=sim.WorldConfig(), threads=1,
                   n_points=dm.N_POINTS):
    """Evaluate every seed on ``scenes`` and optionally write the report."""
    results, traces = [], {}
    for ms in sets:
        tr = []
        t0 = time.perf_counter()
        results += evaluate(ms, scenes, config, threads, n_points, tr)
        traces[ms.seed] = tr
        log.info("evaluated %s seed %d in %.1f s", ms.mode, ms.seed, time.perf_counter() - t0)
    rep = report(results, sets[0].mode)
    if out_dir is not None:
        write_report(rep, out_dir, traces)
    return rep, traces
