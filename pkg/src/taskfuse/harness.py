"""Experiment orchestration: configuration, the regimes x combinations x
seeds sweep, result persistence and plot-data emission.

Every cell of the sweep derives its random streams from content (global
seeds, regime, combination id, seed index) rather than from execution
order, so results are byte-identical regardless of the parallelism degree
and removing one cell never changes another.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adversary, analysis, channel, defense, fusion, params, taskbench, tinyvit
from .seeding import derive_rng, derive_seed

CONFIG_VERSION = 1

REGIMES = ("ideal", "worst_sum_rate", "worst_strongest_user")
DEFENSE_MODES = ("none", "freeze_only", "realign_only", "full")

# Defaults calibrated once on the toy architecture (see README): the noise
# budget puts the benign regime at a moderate mean MMSE while keeping the
# regime ordering ideal < worst_sum_rate on every seed.
DEFAULT_P_NOISE = 1e-4
DEFAULT_POSITION_RANGE = (100.0, 1000.0)


class ConfigError(ValueError):
    """Raised for invalid experiment configurations, with the key path."""


@dataclass(frozen=True)
class ChannelConfig:
    n_rx: int = 16
    p_max: float = 1e-4
    p_noise: float = DEFAULT_P_NOISE
    delta_reg: float = 1e-3
    position_min: float = DEFAULT_POSITION_RANGE[0]
    position_max: float = DEFAULT_POSITION_RANGE[1]
    seed: int = 0

    def __post_init__(self):
        if self.n_rx < 1:
            raise ConfigError("channel.n_rx must be >= 1")
        if self.p_max <= 0 or self.p_noise <= 0:
            raise ConfigError("channel.p_max and channel.p_noise must be positive")
        if not 0 < self.position_min <= self.position_max:
            raise ConfigError("channel.position_min/max must be positive and ordered")


@dataclass(frozen=True)
class SweepConfig:
    regimes: tuple = REGIMES
    defense_modes: tuple = ("none", "full")
    task_counts: tuple = (2, 3, 4, 5, 6, 7, 8)
    combinations: str = "all"       # "all" or "sample:<k>"
    seeds: tuple = (0, 1, 2)
    beta: float = 0.05
    analysis_samples: int = 64

    def __post_init__(self):
        for r in self.regimes:
            if r not in REGIMES:
                raise ConfigError(f"sweep.regimes: unknown regime {r!r}")
        for m in self.defense_modes:
            if m not in DEFENSE_MODES:
                raise ConfigError(f"sweep.defense_modes: unknown mode {m!r}")
        if self.combinations != "all":
            if not self.combinations.startswith("sample:"):
                raise ConfigError("sweep.combinations must be 'all' or 'sample:<k>'")
            try:
                k = int(self.combinations.split(":", 1)[1])
            except ValueError as exc:
                raise ConfigError("sweep.combinations sample size must be an integer") from exc
            if k < 1:
                raise ConfigError("sweep.combinations sample size must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("sweep.beta must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("sweep.seeds must not be empty")

    def sample_size(self) -> int | None:
        if self.combinations == "all":
            return None
        return int(self.combinations.split(":", 1)[1])


DEFAULT_CONFLICT_RATE = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    model: tinyvit.ModelConfig = field(default_factory=tinyvit.ModelConfig)
    tasks: tuple = ()
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    transport: fusion.TransportConfig = field(default_factory=fusion.TransportConfig)
    defense: defense.DefenseConfig = field(default_factory=defense.DefenseConfig)
    pretrain: tinyvit.TrainSpec = field(default_factory=lambda: tinyvit.TrainSpec(
        iterations=1200, batch_size=64, learning_rate=1e-3, optimizer="adam",
        seed=11))
    finetune: tinyvit.TrainSpec = field(default_factory=lambda: tinyvit.TrainSpec(
        iterations=300, batch_size=32, learning_rate=1e-3, optimizer="adam",
        seed=101))
    # groups held frozen while fine-tuning each task (the transport still
    # perturbs them, which is exactly what the freeze defense guards)
    finetune_freeze_tags: frozenset = frozenset(
        {"patch_embed", "pos_embed", "class_embed"})
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "out"

    def __post_init__(self):
        tasks = tuple(self.tasks) if self.tasks else tuple(
            taskbench.default_task_specs(conflict_rate=DEFAULT_CONFLICT_RATE))
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "finetune_freeze_tags",
                           frozenset(self.finetune_freeze_tags))
        unknown = self.finetune_freeze_tags - set(params.GROUP_TAGS)
        if unknown:
            raise ConfigError(f"finetune_freeze_tags: unknown tags {sorted(unknown)}")
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError("tasks: duplicate task_id")
        q = len(tasks)
        for n in self.sweep.task_counts:
            if not 1 <= n <= q:
                raise ConfigError(f"sweep.task_counts: {n} outside [1, {q}]")

    @property
    def num_users(self) -> int:
        return len(self.tasks)

    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def resolved_output_dir(self) -> str:
        return os.environ.get("TASKFUSE_OUT", self.output_dir)


# ---------------------------------------------------------------------------
# Config file round trip (JSON)
# ---------------------------------------------------------------------------

def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "config_version": CONFIG_VERSION,
        "model": asdict(cfg.model),
        "tasks": [asdict(t) for t in cfg.tasks],
        "channel": asdict(cfg.channel),
        "transport": {
            "kappa": cfg.transport.kappa,
            "lambda_table": {str(k): v for k, v in sorted(cfg.transport.lambda_table.items())},
            "seed": cfg.transport.seed,
        },
        "defense": {
            "freeze_tags": sorted(cfg.defense.freeze_tags),
            "fewshot_per_class": cfg.defense.fewshot_per_class,
            "realign_steps": cfg.defense.realign_steps,
            "realign_lr": cfg.defense.realign_lr,
            "enabled_freeze": cfg.defense.enabled_freeze,
            "enabled_realign": cfg.defense.enabled_realign,
            "seed": cfg.defense.seed,
        },
        "pretrain": asdict(cfg.pretrain),
        "finetune": asdict(cfg.finetune),
        "finetune_freeze_tags": sorted(cfg.finetune_freeze_tags),
        "sweep": {
            "regimes": list(cfg.sweep.regimes),
            "defense_modes": list(cfg.sweep.defense_modes),
            "task_counts": list(cfg.sweep.task_counts),
            "combinations": cfg.sweep.combinations,
            "seeds": list(cfg.sweep.seeds),
            "beta": cfg.sweep.beta,
            "analysis_samples": cfg.sweep.analysis_samples,
        },
        "output_dir": cfg.output_dir,
    }


def _build_section(name, payload, builder):
    try:
        return builder(**payload)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    version = raw.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version must be {CONFIG_VERSION}, got {version!r}")
    known = {"config_version", "model", "tasks", "channel", "transport", "defense",
             "pretrain", "finetune", "finetune_freeze_tags", "sweep", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    model = _build_section("model", raw.get("model", {}), tinyvit.ModelConfig)
    tasks_raw = raw.get("tasks", {})
    if isinstance(tasks_raw, dict):
        tasks = tuple(_build_section("tasks", tasks_raw, taskbench.default_task_specs))
    elif isinstance(tasks_raw, list):
        tasks = tuple(_build_section(f"tasks[{i}]", t, taskbench.TaskSpec)
                      for i, t in enumerate(tasks_raw))
    else:
        raise ConfigError("config section 'tasks' must be an object or a list")

    chan = _build_section("channel", raw.get("channel", {}), ChannelConfig)

    tr_raw = dict(raw.get("transport", {}))
    if "lambda_table" in tr_raw:
        try:
            tr_raw["lambda_table"] = {int(k): float(v)
                                      for k, v in tr_raw["lambda_table"].items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config section 'transport.lambda_table': {exc}") from exc
    transport = _build_section("transport", tr_raw, fusion.TransportConfig)

    d_raw = dict(raw.get("defense", {}))
    if "freeze_tags" in d_raw:
        d_raw["freeze_tags"] = frozenset(d_raw["freeze_tags"])
    dfn = _build_section("defense", d_raw, defense.DefenseConfig)

    pre = _build_section("pretrain", raw.get("pretrain", {}), tinyvit.TrainSpec)
    ft = _build_section("finetune", raw.get("finetune", {}), tinyvit.TrainSpec)

    sw_raw = dict(raw.get("sweep", {}))
    for key in ("regimes", "defense_modes", "task_counts", "seeds"):
        if key in sw_raw:
            sw_raw[key] = tuple(sw_raw[key])
    sweep = _build_section("sweep", sw_raw, SweepConfig)

    return ExperimentConfig(model=model, tasks=tasks, channel=chan,
                            transport=transport, defense=dfn, pretrain=pre,
                            finetune=ft,
                            finetune_freeze_tags=frozenset(
                                raw.get("finetune_freeze_tags", ())),
                            sweep=sweep,
                            output_dir=raw.get("output_dir", "out"))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column "
                          f"{exc.colno}: {exc.msg}")
    return config_from_dict(raw)


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Bundle: datasets, base model, per-task checkpoints and task vectors
# ---------------------------------------------------------------------------

@dataclass
class Bundle:
    config: ExperimentConfig
    datasets: dict
    base: params.ParameterSet
    finetuned: dict
    task_vectors: dict
    ref_acc: dict

    def members(self, combo) -> list:
        return [self.task_vectors[tid] for tid in combo]


def build_bundle(config: ExperimentConfig, log=None) -> Bundle:
    """Generate datasets, pretrain the shared base on the task mixture and
    fine-tune one checkpoint per task. Deterministic in the config."""
    say = log or (lambda msg: None)
    mcfg = config.model
    datasets = {}
    for spec in config.tasks:
        datasets[spec.task_id] = taskbench.generate_task(spec, mcfg)
    say(f"generated {len(datasets)} tasks")
    mixture = taskbench.concat_splits([datasets[t].train for t in config.task_ids()])
    base = tinyvit.finetune(tinyvit.init_model(mcfg), mcfg, mixture, config.pretrain)
    say("pretrained shared base on the task mixture")
    finetuned, vectors, refs = {}, {}, {}
    for user, spec in enumerate(config.tasks, start=1):
        tid = spec.task_id
        ft_spec = replace(config.finetune, seed=derive_seed(config.finetune.seed, tid))
        finetuned[tid] = tinyvit.finetune(base, mcfg, datasets[tid].train, ft_spec,
                                          freeze_tags=config.finetune_freeze_tags)
        vectors[tid] = params.compute_task_vector(finetuned[tid], base,
                                                  task_id=tid, source_user=user)
        refs[tid] = tinyvit.evaluate(finetuned[tid], mcfg, datasets[tid].test)
        say(f"fine-tuned {tid}: ref accuracy {refs[tid]:.3f}")
    return Bundle(config=config, datasets=datasets, base=base,
                  finetuned=finetuned, task_vectors=vectors, ref_acc=refs)


# ---------------------------------------------------------------------------
# Channel draws and noise designs
# ---------------------------------------------------------------------------

def draw_channel(config: ExperimentConfig, seed_index: int):
    """Positions and channel matrix for one experiment seed (shared across
    regimes so regime comparisons are matched)."""
    chan = config.channel
    q = config.num_users
    rng = derive_rng("positions", chan.seed, seed_index)
    positions = rng.uniform(chan.position_min, chan.position_max, q)
    H = channel.sample_channels(q, chan.n_rx, positions,
                                seed=derive_seed("H", chan.seed, seed_index))
    return positions, H


def design_for_regime(regime: str, H, config: ExperimentConfig) -> adversary.NoiseDesign:
    chan = config.channel
    q = config.num_users
    caps = np.full(q, chan.p_max)
    if regime == "ideal":
        return adversary.ideal_covariance(chan.p_noise, chan.n_rx)
    if regime == "worst_sum_rate":
        return adversary.solve_p1(H, caps, chan.p_noise)
    if regime == "worst_strongest_user":
        return adversary.solve_p2(H, caps, chan.p_noise, chan.delta_reg)
    raise ValueError(f"unknown regime {regime!r}")


def channel_state(config: ExperimentConfig, H, positions,
                  design: adversary.NoiseDesign) -> channel.ChannelState:
    chan = config.channel
    q = config.num_users
    caps = np.full(q, chan.p_max)
    return channel.ChannelState(H=H, p=caps, P_max=caps, C_z=design.C_z,
                                P_N=chan.p_noise, positions=positions)


# ---------------------------------------------------------------------------
# Sweep cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    regime: str
    defense_mode: str
    n_tasks: int
    combination_id: str
    seed: int
    raw_acc: tuple
    norm_acc: tuple
    mean_norm_acc: float
    snr_db: float
    snr_eff_db: float
    mean_mu: float
    xi: float
    reject_rate: float
    threshold: float
    mean_offdiag_cosine: float
    max_offdiag_cosine: float

    def sort_key(self):
        return (self.regime, self.defense_mode, self.n_tasks,
                self.combination_id, self.seed)


RESULT_COLUMNS = ["regime", "defense_mode", "n_tasks", "combination_id", "seed",
                  "raw_acc", "norm_acc", "mean_norm_acc", "snr_db", "snr_eff_db",
                  "mean_mu", "xi", "reject_rate", "threshold",
                  "mean_offdiag_cosine", "max_offdiag_cosine"]


@dataclass(frozen=True)
class FusionRecord:
    regime: str
    n_tasks: int
    combination_id: str
    seed: int
    lambda_n: float
    kappa: float
    mus: tuple
    noise_variances: tuple


FUSION_COLUMNS = ["regime", "n_tasks", "combination_id", "seed", "lambda_n",
                  "kappa", "mus", "noise_variances"]


def enumerate_combos(config: ExperimentConfig) -> list[tuple[int, tuple]]:
    """(n, combination) cells; combinations of sorted task ids. sample:k
    takes a deterministic per-N sample."""
    ids = sorted(config.task_ids())
    out = []
    k = config.sweep.sample_size()
    for n in sorted(config.sweep.task_counts):
        combos = list(itertools.combinations(ids, n))
        if k is not None and len(combos) > k:
            rng = derive_rng("combo-sample", config.channel.seed, n)
            pick = rng.choice(len(combos), size=k, replace=False)
            combos = [combos[i] for i in sorted(pick)]
        out.extend((n, c) for c in combos)
    return out


def transport_config_for_seed(config: ExperimentConfig, seed_index: int,
                              kappa: float | None = None) -> fusion.TransportConfig:
    """Per-seed transport stream; deliberately independent of the regime so
    matched seeds share noise directions across regimes."""
    return fusion.TransportConfig(
        kappa=config.transport.kappa if kappa is None else kappa,
        lambda_table=dict(config.transport.lambda_table),
        seed=derive_seed("transport", config.transport.seed, seed_index),
    )


def _ratio_samples(bundle: Bundle, combo, clean_merged, noisy_merged, count):
    """Vectorized logit ratios R(x) at the clean model's argmax class, over a
    round-robin draw from the member tasks' test splits."""
    mcfg = bundle.config.model
    per_task = max(1, count // len(combo))
    images = np.concatenate([bundle.datasets[t].test.images[:per_task] for t in combo])
    zu = tinyvit.forward(clean_merged, mcfg, images)
    zd = tinyvit.forward(noisy_merged, mcfg, images)
    k = np.argmax(zu, axis=1)
    rows = np.arange(len(k))
    denom = zd[rows, k]
    keep = np.abs(denom) >= 1e-12
    return zu[rows, k][keep] / denom[keep]


def run_cell(bundle: Bundle, regime: str, n: int, combo: tuple, seed_index: int,
             modes=None) -> tuple[list[ResultRow], FusionRecord]:
    """One (regime, combination, seed) cell, evaluated under every defense
    mode. Transport and analysis are shared across modes."""
    config = bundle.config
    modes = list(modes if modes is not None else config.sweep.defense_modes)
    mcfg = config.model
    positions, H = draw_channel(config, seed_index)
    design = design_for_regime(regime, H, config)
    state = channel_state(config, H, positions, design)
    metrics = channel.link_metrics(state)

    user_of = {tid: i for i, tid in enumerate(config.task_ids())}
    tcfg = transport_config_for_seed(config, seed_index)
    members_clean = bundle.members(combo)
    mus = tuple(float(metrics.mus[user_of[tid]]) for tid in combo)
    transported = [fusion.transmit_task_vector(tau, mu, tcfg)
                   for tau, mu in zip(members_clean, mus)]

    merged = fusion.fuse(bundle.base, transported, tcfg)
    clean_merged = fusion.fuse(bundle.base, members_clean, tcfg)
    lam = tcfg.lambda_for(n)

    member_data = [bundle.datasets[t] for t in combo]
    refs = [bundle.finetuned[t] for t in combo]

    # interference analytics (defense-independent, computed on the merged
    # model before any defense is applied)
    lam_single = config.transport.lambda_table.get(1, lam)
    wde_report = analysis.wde(bundle.base, transported, lam_single, lam,
                              member_data, mcfg,
                              max_samples=config.sweep.analysis_samples)
    if n >= 2:
        cos = analysis.cosine_matrix(transported)
        mean_cos, max_cos = analysis.mean_max_offdiag(cos)
    else:
        mean_cos = max_cos = float("nan")
    ratios = _ratio_samples(bundle, combo, clean_merged, merged,
                            config.sweep.analysis_samples)
    probe = bundle.datasets[combo[0]].test.images[0]
    zu, grad = tinyvit.logit_grad(clean_merged, mcfg, probe, 0)
    k = int(np.argmax(zu))
    if k != 0:
        zu, grad = tinyvit.logit_grad(clean_merged, mcfg, probe, k)
    gflat = params.flatten(grad)
    factor = float(gflat @ gflat) / max(float(zu[k]) ** 2, 1e-30)
    sum_noise_var = lam ** 2 * float(np.sum([tv.noise_variance_used
                                             for tv in transported]))
    T = analysis.threshold(config.sweep.beta,
                           analysis.variance_of_ratio(factor, sum_noise_var))
    hyp = analysis.run_hypothesis_test(ratios, T, beta=config.sweep.beta)

    record = FusionRecord(regime=regime, n_tasks=n, combination_id="+".join(combo),
                          seed=seed_index, lambda_n=lam, kappa=tcfg.kappa,
                          mus=mus,
                          noise_variances=tuple(tv.noise_variance_used
                                                for tv in transported))
    rows = []
    for mode in modes:
        dcfg = config.defense.with_mode(mode)
        dcfg = replace(dcfg, seed=derive_seed(config.defense.seed, regime,
                                              "+".join(combo), seed_index))
        theta = defense.apply_defense(merged, bundle.base, mcfg, member_data, dcfg)
        raw = tuple(tinyvit.evaluate(theta, mcfg, d.test) for d in member_data)
        norm = tuple(r / bundle.ref_acc[t] for r, t in zip(raw, combo))
        rows.append(ResultRow(
            regime=regime, defense_mode=mode, n_tasks=n,
            combination_id="+".join(combo), seed=seed_index,
            raw_acc=raw, norm_acc=norm, mean_norm_acc=float(np.mean(norm)),
            snr_db=metrics.snr_db, snr_eff_db=metrics.snr_eff_db,
            mean_mu=float(np.mean(mus)), xi=wde_report.xi,
            reject_rate=hyp.reject_rate, threshold=T,
            mean_offdiag_cosine=mean_cos, max_offdiag_cosine=max_cos))
    return rows, record


_WORKER_BUNDLE = None


def _init_worker(config_dict):
    global _WORKER_BUNDLE
    _WORKER_BUNDLE = build_bundle(config_from_dict(config_dict))


def _run_cell_worker(args):
    regime, n, combo, seed_index = args
    try:
        rows, record = run_cell(_WORKER_BUNDLE, regime, n, combo, seed_index)
        return rows, record, None
    except Exception as exc:  # cell failures are recorded, not fatal
        return [], None, (regime, n, "+".join(combo), seed_index, repr(exc))


def run_sweep(config: ExperimentConfig, jobs: int = 1, log=None,
              bundle: Bundle | None = None):
    """Execute the full sweep. Returns (rows, fusion_records, failures)."""
    say = log or (lambda msg: None)
    cells = [(regime, n, combo, seed)
             for regime in config.sweep.regimes
             for (n, combo) in enumerate_combos(config)
             for seed in config.sweep.seeds]
    say(f"{len(cells)} cells "
        f"({len(config.sweep.regimes)} regimes x combinations x seeds)")
    rows, records, failures = [], [], []
    if jobs <= 1:
        bundle = bundle or build_bundle(config, log=say)
        for cell in cells:
            try:
                r, rec = run_cell(bundle, *cell)
                rows.extend(r)
                records.append(rec)
            except Exception as exc:
                failures.append((cell[0], cell[1], "+".join(cell[2]), cell[3], repr(exc)))
    else:
        cfg_dict = config_to_dict(config)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(cfg_dict,)) as pool:
            for r, rec, fail in pool.map(_run_cell_worker, cells, chunksize=4):
                rows.extend(r)
                if rec is not None:
                    records.append(rec)
                if fail is not None:
                    failures.append(fail)
    rows.sort(key=ResultRow.sort_key)
    records.sort(key=lambda r: (r.regime, r.n_tasks, r.combination_id, r.seed))
    if failures:
        say(f"{len(failures)} cell(s) failed and were skipped")
    return rows, records, failures


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ";".join(_fmt(v) for v in value)
    return str(value)


def write_csv(path, columns, rows_of_fields) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for fields in rows_of_fields:
            writer.writerow([_fmt(f) for f in fields])


def summarize(rows: list[ResultRow]):
    """Per (regime, defense_mode, n_tasks): mean of mean_norm_acc, pooled
    variance over all cells, and variance of per-seed means."""
    groups = {}
    for row in rows:
        groups.setdefault((row.regime, row.defense_mode, row.n_tasks), []).append(row)
    out = []
    for key in sorted(groups):
        cells = groups[key]
        vals = np.array([c.mean_norm_acc for c in cells])
        per_seed = {}
        for c in cells:
            per_seed.setdefault(c.seed, []).append(c.mean_norm_acc)
        seed_means = np.array([np.mean(v) for _, v in sorted(per_seed.items())])
        out.append((*key, len(cells), float(vals.mean()),
                    float(vals.var()), float(seed_means.var())))
    return out


SUMMARY_COLUMNS = ["regime", "defense_mode", "n_tasks", "cells",
                   "mean_norm_acc", "var_pooled", "var_across_seeds"]


def regime_cosine_matrices(bundle: Bundle) -> dict[str, np.ndarray]:
    """Mean over seeds of the full Q x Q cosine matrix of transported task
    vectors, one matrix per regime."""
    config = bundle.config
    ids = config.task_ids()
    out = {}
    for regime in config.sweep.regimes:
        acc = np.zeros((len(ids), len(ids)))
        for seed_index in config.sweep.seeds:
            positions, H = draw_channel(config, seed_index)
            design = design_for_regime(regime, H, config)
            state = channel_state(config, H, positions, design)
            metrics = channel.link_metrics(state)
            tcfg = transport_config_for_seed(config, seed_index)
            transported = [
                fusion.transmit_task_vector(bundle.task_vectors[tid],
                                            float(metrics.mus[i]), tcfg)
                for i, tid in enumerate(ids)
            ]
            acc += analysis.cosine_matrix(transported)
        out[regime] = acc / len(config.sweep.seeds)
    return out


def emit_outputs(rows, records, failures, bundle: Bundle, outdir,
                 render_figures: bool = True) -> list[str]:
    """Write results.csv, summary.csv, analysis.csv, fusion_records.csv,
    per-regime cosine matrices, the failure log and the rendered figures.
    Returns the list of files written."""
    os.makedirs(outdir, exist_ok=True)
    written = []

    path = os.path.join(outdir, "results.csv")
    write_csv(path, RESULT_COLUMNS,
              ([getattr(r, c) for c in RESULT_COLUMNS] for r in rows))
    written.append(path)

    path = os.path.join(outdir, "summary.csv")
    write_csv(path, SUMMARY_COLUMNS, summarize(rows))
    written.append(path)

    path = os.path.join(outdir, "analysis.csv")
    seen = set()
    arows = []
    for r in rows:
        key = (r.regime, r.n_tasks, r.combination_id, r.seed)
        if key in seen:
            continue
        seen.add(key)
        arows.append((r.regime, r.n_tasks, r.combination_id, r.seed, r.xi,
                      r.reject_rate, r.threshold, r.mean_offdiag_cosine,
                      r.max_offdiag_cosine))
    write_csv(path, ["regime", "n_tasks", "combination_id", "seed", "xi",
                     "reject_rate", "threshold", "mean_offdiag_cosine",
                     "max_offdiag_cosine"], arows)
    written.append(path)

    path = os.path.join(outdir, "fusion_records.csv")
    write_csv(path, FUSION_COLUMNS,
              ([getattr(rec, c) for c in FUSION_COLUMNS] for rec in records))
    written.append(path)

    ids = bundle.config.task_ids()
    for regime, matrix in regime_cosine_matrices(bundle).items():
        path = os.path.join(outdir, f"cosine_{regime}.csv")
        write_csv(path, ["task_id"] + ids,
                  ([tid] + [float(v) for v in matrix[i]]
                   for i, tid in enumerate(ids)))
        written.append(path)

    if failures:
        path = os.path.join(outdir, "failures.csv")
        write_csv(path, ["regime", "n_tasks", "combination_id", "seed", "error"],
                  failures)
        written.append(path)

    if render_figures:
        from . import plots
        written.extend(plots.render_all(outdir))
    return written
