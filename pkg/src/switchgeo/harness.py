"""Experiment configuration, orchestration, manifests and tidy plot data.

Three experiments are wired end to end:

``toy_mechanism``
    gate-noise sweep of the two-regime AR(1) toy (entropy, MIR, observed curvature).
``curvature_gap``
    ITF-trained checkpoints over noise regimes and forcing intervals; ITF Fisher
    against RBPF/Louis observed information on a fixed segment.
``saem_misalignment``
    ITF-pretrained checkpoints fine-tuned by particle-SAEM under
    baseline/calib/full; held-out evidence against dynamical QoIs.
"""
from __future__ import annotations

import copy
import hashlib
import json
import platform
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, _io
from ._pool import map_ordered
from .alrnn import load_checkpoint, save_checkpoint
from .curvature import itf_fisher, save_matrix
from .dynsys import (LorenzParams, NoiseSpec, SaemDataConfig, add_observation_noise, make_saem_dataset,
                     simulate_lorenz, standardize)
from .errors import ConfigError
from .itf import TrainConfig, train
from .louis import ToySweepConfig, mir, rbpf_louis, toy_experiment
from .metrics import RolloutConfig, curvature_gap, matrix_diagnostics, qoi_eval, rank_association
from .rbpf import PalrnnNoise, filtering_code_entropy
from .rng import substream
from .saem import SaemConfig, heldout_evidence, make_windows, saem_run

SCHEMA_VERSION = 1
EXPERIMENTS = ("toy_mechanism", "curvature_gap", "saem_misalignment")


# schema: field -> (kind, default, check); check returns an error message or None

def _pos(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be non-negative"


def _unit(v):
    return None if 0 <= v <= 1 else "must lie in [0, 1]"


def _each(check):
    def run(vals):
        for v in vals:
            msg = check(v)
            if msg:
                return f"every entry {msg}"
        return None if vals else "must be nonempty"
    return run


SECTIONS = {
    "toy": {
        "a0": ("float", 0.90, None), "a1": ("float", 0.60, None), "sigma": ("float", 0.15, _pos),
        "T": ("int", 600, lambda v: None if v >= 2 else "must be >= 2"), "n_seeds": ("int", 20, _pos),
        "sigma_g": ("float_list_or_null", None, _each(_pos)),
    },
    "data": {
        "T_train": ("int", 80_000, _pos), "burn_in": ("int", 1000, _nonneg),
        "sigma_proc": ("float_list", [0.1, 0.3, 0.5], _each(_nonneg)),
        "sigma_obs": ("float_list", [0.1, 0.3, 0.5], _each(_nonneg)),
        "z0": ("float_list", [1.0, 1.0, 1.0], lambda v: None if len(v) == 3 else "must have 3 entries"),
    },
    "train": {
        "tau": ("int_list", [4, 8, 16, 32, 64], _each(_pos)), "n_init": ("int", 4, _pos),
        "M": ("int", 30, _pos), "P": ("int", 10, _pos), "batch_size": ("int", 16, _pos),
        "bptt_len": ("int", 200, lambda v: None if v >= 2 else "must be >= 2"), "epochs": ("int", 2000, _pos),
        "batches_per_epoch": ("int", 50, _pos), "lr_start": ("float", 1e-3, _pos), "lr_end": ("float", 1e-5, _pos),
    },
    "louis": {
        "T": ("int", 200, lambda v: None if v >= 2 else "must be >= 2"), "segment_start": ("int", 0, _nonneg),
        "n_particles": ("int", 64, lambda v: None if v >= 2 else "must be >= 2"),
        "n_draws": ("int", 8, lambda v: None if v >= 2 else "must be >= 2"),
        "tau_ess": ("float", 0.5, _unit), "sigma_g": ("float", 0.1, _pos),
    },
    "diagnostics": {
        "epsilon": ("float", 1e-6, _pos), "k": ("int", 50, _pos),
        "alphas": ("float_list", [0.1, 0.5, 0.9], _each(lambda v: None if 0 < v < 1 else "must lie in (0, 1)")),
    },
    "saem_data": {
        "T": ("int", 5000, _pos), "burn_in": ("int", 1000, _nonneg), "sigma_obs": ("float", 0.085, _nonneg),
        "n_seq": ("int", 4, _pos), "z0_jitter": ("float", 1.0, _nonneg),
    },
    "pretrain": {
        "sigma_proc": ("float_list", [0.1, 0.3, 0.5], _each(_nonneg)),
        "sigma_obs": ("float_list", [0.0, 0.1, 0.3, 0.5], _each(_nonneg)),
        "T_train": ("int", 80_000, _pos), "T_test": ("int", 20_000, _pos), "burn_in": ("int", 1000, _nonneg),
        "tau": ("int", 16, _pos), "M": ("int", 30, _pos), "P": ("int", 10, _pos),
        "batch_size": ("int", 16, _pos), "bptt_len": ("int", 200, lambda v: None if v >= 2 else "must be >= 2"),
        "epochs": ("int", 2000, _pos), "batches_per_epoch": ("int", 50, _pos),
        "lr_start": ("float", 1e-3, _pos), "lr_end": ("float", 1e-5, _pos),
    },
    "saem": {
        "window_lens": ("int_list", [16, 32, 64, 128, 200], _each(lambda v: None if v >= 2 else "must be >= 2")),
        "iterations": ("int", 8, _nonneg), "windows_per_iter": ("int", 80, _pos), "ridge": ("float", 1e-2, _nonneg),
        "blend": ("float", 0.25, _unit), "n_particles": ("int", 256, lambda v: None if v >= 2 else "must be >= 2"),
        "n_smooth": ("int", 8, _pos), "tau_ess": ("float", 0.5, _unit), "sigma_g": ("float", 0.7, _pos),
        "sigma_min": ("float", 1e-4, _pos), "heldout_window_count": ("int", 120, _nonneg),
        "configurations": ("str_list", ["baseline", "calib", "full"],
                           _each(lambda v: None if v in ("baseline", "calib", "full") else "unknown configuration")),
        "init_sigma_proc": ("float", 0.1, _pos), "init_sigma_obs": ("float", 0.1, _pos),
    },
    "qoi": {
        "T": ("int", 10_000, _pos), "burn_in": ("int", 1000, _nonneg), "dt": ("float", 0.01, _pos),
        "n_bins": ("int", 30, _pos), "alpha_smooth": ("float", 1e-5, _pos),
    },
}

EXPERIMENT_SECTIONS = {
    "toy_mechanism": ("toy",),
    "curvature_gap": ("data", "train", "louis", "diagnostics"),
    "saem_misalignment": ("saem_data", "pretrain", "saem", "qoi"),
}

TOP_LEVEL = {"schema_version", "experiment", "seed", "output_dir", "checkpoints"}


def _coerce(kind, value):
    """Return ``(value, error)``."""
    def num(v, integer):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return None, "must be a number"
        if integer and not float(v).is_integer():
            return None, "must be an integer"
        return (int(v) if integer else float(v)), None

    if kind in ("int", "float"):
        return num(value, kind == "int")
    if kind == "str_list":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            return None, "must be a list of strings"
        return list(value), None
    if kind == "float_list_or_null" and value is None:
        return None, None
    if kind in ("int_list", "float_list", "float_list_or_null"):
        if not isinstance(value, list):
            return None, "must be a list of numbers" + (" or null" if kind.endswith("null") else "")
        out = []
        for v in value:
            c, err = num(v, kind == "int_list")
            if err:
                return None, "entries " + err
            out.append(c)
        return out, None
    raise AssertionError(kind)


def _validate_section(name, given, errors):
    schema = SECTIONS[name]
    out = {}
    if not isinstance(given, dict):
        errors.append((f"/{name}", "must be an object"))
        return out
    for key in given:
        if key not in schema:
            errors.append((f"/{name}/{key}", "unknown key"))
    for key, (kind, default, check) in schema.items():
        ptr = f"/{name}/{key}"
        if key not in given:
            out[key] = copy.deepcopy(default)
            continue
        value, err = _coerce(kind, given[key])
        if err:
            errors.append((ptr, err))
            continue
        if value is not None and check is not None:
            msg = check(value)
            if msg:
                errors.append((ptr, msg))
                continue
        out[key] = value
    return out


def validate_config(obj, base_dir=None) -> dict:
    """Fill defaults and check types/ranges; raises :class:`ConfigError` listing every problem."""
    errors = []
    if not isinstance(obj, dict):
        raise ConfigError([("", "config must be a JSON object")])
    exp = obj.get("experiment")
    if exp not in EXPERIMENTS:
        errors.append(("/experiment", f"must be one of {list(EXPERIMENTS)}, got {exp!r}"))
        raise ConfigError(errors)
    version = obj.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(("/schema_version", f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})"))
    sections = EXPERIMENT_SECTIONS[exp]
    for key in obj:
        if key not in TOP_LEVEL and key not in sections:
            errors.append((f"/{key}", "unknown key" + (" for this experiment" if key in SECTIONS else "")))
    seed = obj.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors.append(("/seed", "must be a non-negative integer"))
    out = {"schema_version": SCHEMA_VERSION, "experiment": exp, "seed": seed}
    if "output_dir" in obj:
        if not isinstance(obj["output_dir"], str):
            errors.append(("/output_dir", "must be a string"))
        else:
            out["output_dir"] = obj["output_dir"]
    for name in sections:
        out[name] = _validate_section(name, obj.get(name, {}), errors)
    if exp == "curvature_gap" and "train" in out and out["train"].get("lr_end", 0) > out["train"].get("lr_start", 1):
        errors.append(("/train/lr_end", "must not exceed lr_start"))
    if exp == "saem_misalignment" and "pretrain" in out and \
            out["pretrain"].get("lr_end", 0) > out["pretrain"].get("lr_start", 1):
        errors.append(("/pretrain/lr_end", "must not exceed lr_start"))
    out["checkpoints"] = _validate_checkpoints(obj.get("checkpoints"), exp, base_dir, errors)
    if errors:
        raise ConfigError(errors)
    return out


def _validate_checkpoints(entries, exp, base_dir, errors):
    """Optional pre-trained checkpoints; each entry is ``{"path": ..., plus regime labels}``."""
    if entries is None:
        return None
    if exp == "toy_mechanism":
        errors.append(("/checkpoints", "not used by toy_mechanism"))
        return None
    if not isinstance(entries, list) or not entries:
        errors.append(("/checkpoints", "must be a nonempty list"))
        return None
    need = {"curvature_gap": ("sigma_proc", "sigma_obs", "tau"), "saem_misalignment": ()}[exp]
    out = []
    for k, e in enumerate(entries):
        ptr = f"/checkpoints/{k}"
        if not isinstance(e, dict) or not isinstance(e.get("path"), str):
            errors.append((ptr, "must be an object with a string 'path'"))
            continue
        path = Path(e["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not _io.sidecar(path).exists():
            errors.append((f"{ptr}/path", f"file not found: {path}"))
        item = {"path": str(path)}
        for key in need:
            c, err = _coerce("float" if key != "tau" else "int", e.get(key))
            if err:
                errors.append((f"{ptr}/{key}", err))
            item[key] = c
        for key in e:
            if key not in ("path", "label", *need):
                errors.append((f"{ptr}/{key}", "unknown key"))
        item["label"] = str(e.get("label", _io._stem(path).name))
        out.append(item)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"invalid JSON: {exc}")]) from exc
    return validate_config(obj, base_dir=path.parent)


def int_seed(*key) -> int:
    return int(substream(*key).integers(2 ** 31))


class Recorder:
    """Tracks every file an experiment writes so the manifest can list and hash it."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, paths):
        for p in paths if isinstance(paths, (list, tuple)) else [paths]:
            self.files.append(Path(p))

    def csv(self, rel, columns, rows):
        self.add(_io.write_csv(self.path(rel), columns, rows))

    def json(self, rel, obj):
        self.add(_io.write_json(self.path(rel), obj))


def _versions():
    import numba
    import scipy

    return {"switchgeo": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(rec: Recorder, config: dict, inputs=(), wall_clock=None, status="ok") -> Path:
    outputs = sorted({p.resolve() for p in rec.files})
    entries = [{"path": str(p.relative_to(rec.root.resolve())), "sha256": _io.file_sha256(p),
                "bytes": p.stat().st_size} for p in outputs]
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    manifest = {"schema_version": SCHEMA_VERSION, "experiment": config["experiment"], "status": status,
                "config": config, "config_sha256": hashlib.sha256(cfg_bytes).hexdigest(),
                "inputs": [{"path": str(p), "sha256": _io.file_sha256(p)} for p in inputs],
                "outputs": entries, "versions": _versions(), "wall_clock_s": wall_clock}
    return _io.write_json(rec.root / "manifest.json", manifest)


# experiments

TOY_COLUMNS = ["sigma_g", "seed", "mean_entropy_bits", "mir", "log10_tr_iobs"]


def run_toy(config, rec: Recorder):
    t = config["toy"]
    res = toy_experiment(ToySweepConfig(t["a0"], t["a1"], t["sigma"], t["T"], t["n_seeds"],
                                        None if t["sigma_g"] is None else tuple(t["sigma_g"]), config["seed"]))
    rec.csv("toy/toy_sweep.csv", TOY_COLUMNS, res.rows)
    rec.csv("toy/toy_summary.csv", list(res.SUMMARY_COLUMNS), res.summary)
    return {"n_rows": len(res.rows)}


def _lorenz_regime(seed, tag, T, burn_in, z0, sigma_proc, sigma_obs):
    key = (seed, tag, "data", f"{sigma_proc:g}", f"{sigma_obs:g}")
    raw = simulate_lorenz(z0, T + burn_in, LorenzParams(), NoiseSpec(sigma_proc, 0.0, int_seed(*key, "proc")))
    kept = type(raw)(raw.states[burn_in:], raw.states[burn_in:], None, "raw", dict(raw.meta, burn_in=burn_in))
    noisy = add_observation_noise(kept, NoiseSpec(0.0, sigma_obs, int_seed(*key, "obs")))
    return standardize(noisy)


CURV_COLUMNS = ["ckpt", "H_c", "g_Q", "sigma_obs", "sigma_proc", "tau", "init", "mir", "delta_logdet",
                "q_gamma", "ov_k", "mismatch_ok", "tr_itf", "tr_iobs", "T"]


def _train_cfg(section, tau, seed):
    return TrainConfig(tau=tau, batch_size=section["batch_size"], bptt_len=section["bptt_len"],
                       epochs=section["epochs"], batches_per_epoch=section["batches_per_epoch"],
                       lr_start=section["lr_start"], lr_end=section["lr_end"], seed=seed,
                       M=section["M"], P=section["P"])


def _train_and_save(rec, rel, cfg, bundle, meta):
    result = train(cfg, bundle)
    paths = save_checkpoint(rec.path(rel), result.params, dict(meta, train=asdict(cfg)))
    rec.add(paths)
    rec.csv(rel + "_loss.csv", ["epoch", "mean_loss", "lr"], result.history_rows())
    return result.params


def run_curvature_gap(config, rec: Recorder):
    seed = config["seed"]
    d, tr, lo, dg = config["data"], config["train"], config["louis"], config["diagnostics"]
    bundles = {}

    def bundle_for(sp, so):
        if (sp, so) not in bundles:
            bundles[(sp, so)] = _lorenz_regime(seed, "curvature_gap", d["T_train"], d["burn_in"], d["z0"], sp, so)
        return bundles[(sp, so)]

    units = []
    if config["checkpoints"]:
        for e in config["checkpoints"]:
            units.append({"sp": e["sigma_proc"], "so": e["sigma_obs"], "tau": e["tau"], "init": 0,
                          "ckpt": e["path"], "label": e["label"]})
    else:
        for sp in d["sigma_proc"]:
            for so in d["sigma_obs"]:
                for tau in tr["tau"]:
                    for k in range(tr["n_init"]):
                        units.append({"sp": sp, "so": so, "tau": tau, "init": k, "ckpt": None,
                                      "label": f"sp{sp:g}_so{so:g}_tau{tau}_init{k}"})
    for u in units:
        if u["sp"] <= 0 or u["so"] <= 0:
            raise ConfigError([("/data", "curvature diagnostics need sigma_proc > 0 and sigma_obs > 0")])
        bundle_for(u["sp"], u["so"])

    def work(u):
        bundle = bundles[(u["sp"], u["so"])]
        if u["ckpt"]:
            params, _ = load_checkpoint(u["ckpt"])
        else:
            cfg = _train_cfg(tr, u["tau"], int_seed(seed, "curvature_gap", "train", u["label"]))
            params = _train_and_save(rec, f"checkpoints/{u['label']}", cfg, bundle,
                                     {"sigma_proc": u["sp"], "sigma_obs": u["so"], "tau": u["tau"]})
        seg = bundle.observations[lo["segment_start"]:lo["segment_start"] + lo["T"]]
        if seg.shape[0] < lo["T"]:
            raise ConfigError([("/louis/T", "segment runs past the end of the training data")])
        I_itf = itf_fisher(params, seg, u["tau"], u["so"])
        noise = PalrnnNoise(u["sp"], u["so"], lo["sigma_g"])
        est, cloud = rbpf_louis(params, noise, seg, lo["n_particles"], lo["n_draws"], lo["tau_ess"],
                                seed=(seed, "curvature_gap", "louis", u["label"]))
        _, H_c = filtering_code_entropy(cloud)
        try:
            rep = matrix_diagnostics(I_itf, est.I_obs, est.T, dg["epsilon"], dg["k"], tuple(dg["alphas"]))
            extra = [rep.delta_logdet, rep.gamma_quantiles[max(rep.gamma_quantiles)], rep.ov_k, 1]
        except np.linalg.LinAlgError:
            # MC noise can leave the Louis estimate indefinite; g_Q stays defined
            extra = [np.nan, np.nan, np.nan, 0]
        rec.add(save_matrix(rec.path(f"matrices/{u['label']}_itf"), I_itf))
        rec.add(save_matrix(rec.path(f"matrices/{u['label']}_iobs"), est.I_obs))
        rec.csv(f"diagnostics/{u['label']}_rbpf.csv",
                ["t", "ess_normalized", "resampled_flag", "entropy_bits", "logZ_increment"], cloud.diagnostics_rows())
        return [params.digest()[:16], H_c, curvature_gap(I_itf, est.I_obs, est.T), u["so"], u["sp"], u["tau"],
                u["init"], mir(est), *extra, I_itf.trace(), est.I_obs.trace(), est.T]

    rows = map_ordered(work, units)
    rec.csv("curvature_gap/curvature_gap.csv", CURV_COLUMNS, rows)
    return {"n_checkpoints": len(rows)}


SAEM_COLUMNS = ["ckpt", "L", "config", "evidence", "d_stsp", "le_error", "lambda1", "divergent",
                "sigma_proc", "sigma_obs"]


def run_saem_misalignment(config, rec: Recorder):
    seed = config["seed"]
    sd, pt, sa, qo = config["saem_data"], config["pretrain"], config["saem"], config["qoi"]
    data = make_saem_dataset(SaemDataConfig(sd["T"], sd["burn_in"], sd["sigma_obs"], sd["n_seq"], seed,
                                            sd["z0_jitter"]))
    if config["checkpoints"]:
        inits = [(e["label"], load_checkpoint(e["path"])[0]) for e in config["checkpoints"]]
    else:
        inits = []
        for sp in pt["sigma_proc"]:
            for so in pt["sigma_obs"]:
                label = f"sp{sp:g}_so{so:g}"
                bundle = _lorenz_regime(seed, "saem_pretrain", pt["T_train"], pt["burn_in"], [1.0, 1.0, 1.0], sp, so)
                cfg = _train_cfg(pt, pt["tau"], int_seed(seed, "saem_misalignment", "train", label))
                inits.append((label, _train_and_save(rec, f"checkpoints/{label}", cfg, bundle,
                                                     {"sigma_proc": sp, "sigma_obs": so, "tau": pt["tau"]})))
    qcfg = RolloutConfig(qo["T"], qo["burn_in"], qo["dt"], qo["n_bins"], qo["alpha_smooth"])
    units = [(label, params, L, conf) for label, params in inits for L in sa["window_lens"]
             for conf in sa["configurations"]]

    def work(unit):
        label, params, L, conf = unit
        cfg = SaemConfig(L, sa["iterations"], sa["windows_per_iter"], sa["ridge"], sa["blend"],
                         sa["n_particles"], sa["n_smooth"], sa["tau_ess"], sa["sigma_g"], sa["sigma_min"], conf,
                         sa["heldout_window_count"], int_seed(seed, "saem", label, L))
        noise0 = PalrnnNoise(sa["init_sigma_proc"], sa["init_sigma_obs"], sa["sigma_g"])
        train_w, held_w = make_windows(data, L, sa["heldout_window_count"])
        res = saem_run(params, noise0, data, cfg, train_windows=train_w)
        ev, _ = heldout_evidence(res.params, res.noise, data, held_w, L, sa["n_particles"], sa["tau_ess"],
                                 seed=(seed, "saem_heldout", label, L))
        q = qoi_eval(res.params, data[0], qcfg)
        tag = f"{label}_L{L}_{conf}"
        rec.add(save_checkpoint(rec.path(f"saem/{tag}"), res.params, {"noise": res.noise.to_json(), "L": L,
                                                                       "configuration": conf, "init": label}))
        rec.csv(f"saem/{tag}_log.csv", list(res.LOG_COLUMNS), res.log_rows())
        return [params.digest()[:16], L, conf, ev, q.d_stsp, q.lambda1_error, q.lambda1, q.divergent,
                res.noise.sigma_proc, res.noise.sigma_obs]

    rows = map_ordered(work, units)
    rec.csv("saem/saem_results.csv", SAEM_COLUMNS, rows)
    return {"n_rows": len(rows)}


RUNNERS = {"toy_mechanism": run_toy, "curvature_gap": run_curvature_gap,
           "saem_misalignment": run_saem_misalignment}


def run_experiment(config, out_dir=None):
    """Validate, run and write the manifest. Returns ``(summary, manifest_path)``."""
    base = None
    if isinstance(config, (str, Path)):
        base = Path(config).parent
        cfg = load_config(config)
    else:
        cfg = validate_config(config, base)
    out = Path(out_dir or cfg.get("output_dir") or "results")
    rec = Recorder(out)
    rec.json("config.normalized.json", cfg)
    start = time.perf_counter()
    summary = RUNNERS[cfg["experiment"]](cfg, rec)
    inputs = [_io.sidecar(e["path"]) for e in (cfg["checkpoints"] or [])]
    path = write_manifest(rec, cfg, inputs, round(time.perf_counter() - start, 3))
    return summary, path


# plot data

PLOT_SCHEMAS = {
    "fig1a": {"source": "toy/toy_sweep.csv",
              "columns": [("sigma_g", "float", "gate-noise scale"), ("seed", "int", "replicate index"),
                          ("entropy", "float", "time-averaged gate posterior entropy (bits)"),
                          ("mir", "float", "missing-information ratio"),
                          ("log10_tr", "float", "log10 trace of observed information (summed over time)")],
              "map": ["sigma_g", "seed", "mean_entropy_bits", "mir", "log10_tr_iobs"]},
    "fig1b": {"source": "curvature_gap/curvature_gap.csv",
              "columns": [("ckpt", "str", "checkpoint hash prefix"),
                          ("H_c", "float", "filtering code entropy, time average (bits)"),
                          ("g_Q", "float", "curvature gap, log10 per-step trace ratio"),
                          ("sigma_obs", "float", "observation noise of the regime"),
                          ("sigma_proc", "float", "process noise of the regime")],
              "map": ["ckpt", "H_c", "g_Q", "sigma_obs", "sigma_proc"]},
    "fig1c": {"source": "saem/saem_results.csv",
              "columns": [("ckpt", "str", "initialization checkpoint hash prefix"), ("L", "int", "window length"),
                          ("config", "str", "baseline, calib or full"),
                          ("evidence", "float", "held-out log evidence per step and dimension"),
                          ("d_stsp", "float", "state-space divergence (nats)"),
                          ("le_error", "float", "signed largest-Lyapunov-exponent error")],
              "map": ["ckpt", "L", "config", "evidence", "d_stsp", "le_error"]},
}


class MissingArtifacts(OSError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing upstream artifacts: " + ", ".join(self.missing))


def emit_plot_data(results_dir) -> list[Path]:
    """Write ``plots/figXX.csv`` plus a schema JSON for every panel whose source table exists."""
    root = Path(results_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifacts([str(manifest_path)])
    manifest = json.loads(manifest_path.read_text())
    listed = {e["path"] for e in manifest.get("outputs", [])}
    written, missing = [], []
    for fig, spec in PLOT_SCHEMAS.items():
        src = root / spec["source"]
        if spec["source"] not in listed:
            continue
        if not src.exists():
            missing.append(str(src))
            continue
        header, rows = _io.read_csv(src)
        idx = [header.index(c) for c in spec["map"]]
        out = root / "plots" / f"{fig}.csv"
        names = [c[0] for c in spec["columns"]]
        written.append(_io.write_csv(out, names, ([r[i] for i in idx] for r in rows)))
        schema = {"panel": fig, "file": out.name, "source": spec["source"], "n_rows": len(rows),
                  "columns": [{"name": n, "type": t, "description": d} for n, t, d in spec["columns"]]}
        written.append(_io.write_json(root / "plots" / f"{fig}.schema.json", schema))
    if missing or not written:
        raise MissingArtifacts(missing or [f"{root}/<any figure source table>"])
    manifest["plots"] = [{"path": str(p.relative_to(root)), "sha256": _io.file_sha256(p)} for p in written]
    _io.write_json(manifest_path, manifest)
    return written


STRATA_COLUMNS = ["sigma_proc", "n", "H_min", "H_max", "H_span", "spearman_r", "spearman_p", "partial_r",
                  "ci_low", "ci_high"]


def stratified_association(table, n_boot: int = 2000, seed=0):
    """Per-sigma_proc rank association of ``H_c`` and ``g_Q`` (rows with sigma_obs > 0), partial on sigma_obs."""
    header, rows = table
    col = {name: header.index(name) for name in ("H_c", "g_Q", "sigma_obs", "sigma_proc")}
    data = np.array([[float(r[col[c]]) for c in ("H_c", "g_Q", "sigma_obs", "sigma_proc")] for r in rows])
    if data.size == 0:
        raise ValueError("empty table")
    data = data[(data[:, 2] > 0) & np.all(np.isfinite(data[:, :2]), axis=1)]
    out = []
    for sp in np.unique(data[:, 3]):
        d = data[data[:, 3] == sp]
        ra = rank_association(d[:, 0], d[:, 1], d[:, 2], n_boot, (seed, "analyze", f"{sp:g}"))
        out.append([sp, ra.n, d[:, 0].min(), d[:, 0].max(), np.ptp(d[:, 0]), ra.spearman_r, ra.p_value,
                    ra.partial_r, ra.ci_low, ra.ci_high])
    return out
