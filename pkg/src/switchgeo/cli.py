"""``switchgeo`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, _io, harness
from .alrnn import load_checkpoint, save_checkpoint
from .curvature import itf_fisher, load_matrix, save_matrix
from .dynsys import SaemDataConfig, export_csv, load_bundle, make_saem_dataset, save_bundle
from .errors import ConfigError, NumericalError
from .itf import train
from .louis import ToySweepConfig, mir, rbpf_louis, toy_experiment
from .metrics import MismatchReport, RolloutConfig, matrix_diagnostics, qoi_eval
from .rbpf import PalrnnNoise, filtering_code_entropy
from .saem import SaemConfig, heldout_evidence, make_windows, saem_run

log = logging.getLogger("switchgeo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _load_json(path):
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"{path}: invalid JSON: {exc}")]) from exc
    if not isinstance(obj, dict):
        raise ConfigError([("", f"{path}: expected a JSON object")])
    return obj


def _section(name, path, overrides):
    """Validate one config section (file contents plus CLI overrides) against the harness schema."""
    given = dict(_load_json(path))
    given.update({k: v for k, v in overrides.items() if v is not None})
    errors = []
    out = harness._validate_section(name, given, errors)
    if errors:
        raise ConfigError(errors)
    return out


def _segment(bundle, start, length):
    x = bundle.observations
    stop = x.shape[0] if length is None else start + length
    if start < 0 or stop > x.shape[0] or stop - start < 2:
        raise ConfigError([("/segment", f"segment [{start}, {stop}) outside data of length {x.shape[0]}")])
    return x[start:stop]


GEN_DATA_DEFAULTS = {"T": 80_000, "burn_in": 1000, "sigma_proc": 0.0, "sigma_obs": 0.0, "z0": [1.0, 1.0, 1.0],
                     "saem": False, "n_seq": 4, "z0_jitter": 1.0, "csv": False, "seed": 0}


def _gen_data_options(args):
    cfg = _load_json(args.config)
    errors = [(f"/{k}", "unknown key") for k in cfg if k not in GEN_DATA_DEFAULTS]
    if errors:
        raise ConfigError(errors)
    opts = dict(GEN_DATA_DEFAULTS, **cfg)
    for key in GEN_DATA_DEFAULTS:
        v = getattr(args, key)
        if v is not None and v is not False:
            opts[key] = v
    return opts


def _bundle_path(path):
    path = Path(path)
    return path / "trajectory" if path.is_dir() else path


def cmd_gen_data(args):
    o = _gen_data_options(args)
    out = Path(args.out)
    if o["saem"]:
        seqs = make_saem_dataset(SaemDataConfig(o["T"], o["burn_in"], o["sigma_obs"], o["n_seq"], o["seed"],
                                                o["z0_jitter"]))
        written = []
        for j, b in enumerate(seqs):
            written += save_bundle(b, out / f"seq_{j}")
            if o["csv"]:
                written.append(export_csv(b, out / f"seq_{j}.csv"))
    else:
        b = harness._lorenz_regime(o["seed"], "gen_data", o["T"], o["burn_in"], o["z0"], o["sigma_proc"],
                                   o["sigma_obs"])
        written = save_bundle(b, out / "trajectory")
        if o["csv"]:
            written.append(export_csv(b, out / "trajectory.csv"))
    for p in written:
        print(p)


def cmd_train_itf(args):
    cfg = _section("train", args.config, {"tau": [args.tau] if args.tau else None, "epochs": args.epochs,
                                          "M": args.M, "P": args.P, "batch_size": args.batch_size,
                                          "batches_per_epoch": args.batches_per_epoch, "bptt_len": args.bptt_len})
    if len(cfg["tau"]) != 1:
        raise ConfigError([("/train/tau", "train-itf needs exactly one forcing interval")])
    tc = harness._train_cfg(cfg, cfg["tau"][0], args.seed)
    bundle = load_bundle(_bundle_path(args.data))

    def progress(entry):
        log.info("epoch %d loss %.6g", entry["epoch"], entry["mean_loss"])

    result = train(tc, bundle, progress=progress if args.verbose else None)
    paths = save_checkpoint(args.out, result.params, {"train": result.config, "data": str(args.data)})
    loss_csv = _io.write_csv(str(_io._stem(args.out)) + "_loss.csv", ["epoch", "mean_loss", "lr"],
                             result.history_rows())
    for p in [*paths, loss_csv]:
        print(p)


def cmd_fisher_itf(args):
    params, _ = load_checkpoint(args.ckpt)
    x = _segment(load_bundle(_bundle_path(args.data)), args.start, args.length)
    mat = itf_fisher(params, x, args.tau, args.sigma_obs)
    for p in save_matrix(args.out, mat):
        print(p)
    print(f"trace {mat.trace():.17g}")


def cmd_rbpf_louis(args):
    params, _ = load_checkpoint(args.ckpt)
    x = _segment(load_bundle(_bundle_path(args.data)), args.start, args.length)
    nz = {"sigma_proc": args.sigma_proc, "sigma_obs": args.sigma_obs, "sigma_g": args.sigma_g}
    if args.noise:
        given = _load_json(args.noise)
        bad = [(f"/{k}", "unknown key") for k in given if k not in nz]
        if bad:
            raise ConfigError(bad)
        nz.update({k: v for k, v in given.items() if v is not None})
    missing = [(f"/{k}", "required (flag or --noise file)") for k, v in nz.items() if v is None]
    if missing:
        raise ConfigError(missing)
    noise = PalrnnNoise(**nz)
    est, cloud = rbpf_louis(params, noise, x, args.particles, args.draws, args.tau_ess, args.seed)
    stem = str(_io._stem(args.out))
    written = save_matrix(stem + "_iobs", est.I_obs) + save_matrix(stem + "_icomp", est.E_I_comp)
    written.append(_io.write_csv(stem + "_rbpf.csv",
                                 ["t", "ess_normalized", "resampled_flag", "entropy_bits", "logZ_increment"],
                                 cloud.diagnostics_rows()))
    _, H_c = filtering_code_entropy(cloud)
    value, negative = mir(est, return_flag=True)
    summary = {"ckpt": params.digest(), "H_c": H_c, "mir": value, "mir_negative": negative,
               "log_evidence": cloud.log_evidence, "trace_I_obs": est.I_obs.trace(),
               "trace_E_I_comp": est.E_I_comp.trace(), "T": est.T, "noise": noise.to_json(),
               "n_particles": args.particles, "n_draws": args.draws}
    written.append(_io.write_json(stem + "_summary.json", summary))
    for p in written:
        print(p)


def cmd_toy_louis(args):
    t = _section("toy", args.config, {"T": args.T, "n_seeds": args.n_seeds})
    res = toy_experiment(ToySweepConfig(t["a0"], t["a1"], t["sigma"], t["T"], t["n_seeds"],
                                        None if t["sigma_g"] is None else tuple(t["sigma_g"]), args.seed))
    out = Path(args.out)
    print(_io.write_csv(out, harness.TOY_COLUMNS, res.rows))
    print(_io.write_csv(out.with_name(out.stem + "_summary.csv"), list(res.SUMMARY_COLUMNS), res.summary))


def _saem_sequences(args, sd):
    if not args.data:
        return make_saem_dataset(SaemDataConfig(sd["T"], sd["burn_in"], sd["sigma_obs"], sd["n_seq"], args.seed,
                                                sd["z0_jitter"]))
    paths = [Path(p) for p in args.data]
    if len(paths) == 1 and paths[0].is_dir():
        paths = sorted(paths[0].glob("seq_*.json"), key=lambda q: int(q.stem.split("_")[1]))
        if not paths:
            raise FileNotFoundError(f"no seq_*.json bundles in {args.data[0]}")
    return [load_bundle(p) for p in paths]


def cmd_saem(args):
    raw = _load_json(args.config)
    # either a bare saem section or {"saem": {...}, "saem_data": {...}}
    sectioned = "saem" in raw or "saem_data" in raw
    extra = [(f"/{k}", "unknown key") for k in raw if sectioned and k not in ("saem", "saem_data")]
    if extra:
        raise ConfigError(extra)
    over = {"window_lens": [args.L] if args.L else None, "iterations": args.iterations}
    errors = []
    sa = harness._validate_section("saem", dict(raw.get("saem", {}) if sectioned else raw,
                                                **{k: v for k, v in over.items() if v is not None}), errors)
    sd = harness._validate_section("saem_data", raw.get("saem_data", {}) if sectioned else {}, errors)
    if errors:
        raise ConfigError(errors)
    params, _ = load_checkpoint(args.ckpt)
    seqs = _saem_sequences(args, sd)
    out = Path(args.out)
    rows = []
    for L in sa["window_lens"]:
        train_w, held_w = make_windows(seqs, L, sa["heldout_window_count"])
        for conf in sa["configurations"]:
            cfg = SaemConfig(L, sa["iterations"], sa["windows_per_iter"], sa["ridge"], sa["blend"],
                             sa["n_particles"], sa["n_smooth"], sa["tau_ess"], sa["sigma_g"], sa["sigma_min"],
                             conf, sa["heldout_window_count"], args.seed)
            noise0 = PalrnnNoise(sa["init_sigma_proc"], sa["init_sigma_obs"], sa["sigma_g"])
            res = saem_run(params, noise0, seqs, cfg, train_windows=train_w)
            ev, per = np.nan, np.zeros(0)
            if held_w:
                ev, per = heldout_evidence(res.params, res.noise, seqs, held_w, L, sa["n_particles"], sa["tau_ess"],
                                           seed=(args.seed, "saem_heldout", L))
            tag = f"L{L}_{conf}"
            for p in save_checkpoint(out / tag, res.params, {"noise": res.noise.to_json(), "L": L,
                                                              "configuration": conf}):
                print(p)
            print(_io.write_csv(out / f"{tag}_log.csv", list(res.LOG_COLUMNS), res.log_rows()))
            print(_io.write_json(out / f"{tag}_evidence.json",
                                 {"ckpt": params.digest(), "L": L, "configuration": conf, "evidence": ev,
                                  "per_window": per, "windows": [[w.seq, w.start] for w in held_w],
                                  "noise": res.noise.to_json(), "params_sha256": res.params.digest()}))
            rows.append([params.digest()[:16], L, conf, ev, res.noise.sigma_proc, res.noise.sigma_obs,
                         res.params.digest()])
    print(_io.write_csv(out / "saem_summary.csv",
                        ["ckpt", "L", "config", "evidence", "sigma_proc", "sigma_obs", "params_sha256"], rows))


def cmd_eval_qoi(args):
    q = _section("qoi", args.config, {"T": args.T})
    cfg = RolloutConfig(q["T"], q["burn_in"], q["dt"], q["n_bins"], q["alpha_smooth"])
    ref = load_bundle(_bundle_path(args.data))
    rows = []
    for ck in args.ckpt:
        params, _ = load_checkpoint(ck)
        r = qoi_eval(params, ref, cfg)
        rows.append([params.digest()[:16], r.d_stsp, r.lambda1, r.lambda1_error, int(r.divergent)])
    print(_io.write_csv(args.out, ["ckpt", "d_stsp", "lambda1", "le_error", "divergent"], rows))


def cmd_mismatch(args):
    A, B = load_matrix(args.itf), load_matrix(args.obs)
    rep: MismatchReport = matrix_diagnostics(A, B, args.T, args.epsilon, args.k)
    key = args.label or A.meta.get("source_params_sha256", "")[:16]
    qs = [rep.gamma_quantiles[a] for a in sorted(rep.gamma_quantiles)]
    cols = ["ckpt", "g_Q", "delta_logdet", "q10", "q50", "q90", "ov_k", "mu", "k"]
    print(_io.write_csv(args.out, cols, [[key, rep.g_Q, rep.delta_logdet, *qs, rep.ov_k, rep.mu, rep.k]]))


def cmd_analyze(args):
    rows = harness.stratified_association(_io.read_csv(args.input), args.n_boot, args.seed)
    print(_io.write_csv(args.out, harness.STRATA_COLUMNS, rows))


def cmd_run(args):
    summary, manifest = harness.run_experiment(args.config, args.out)
    print(json.dumps(summary))
    print(manifest)


def cmd_emit_plots(args):
    for p in harness.emit_plot_data(args.results):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="switchgeo", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate Lorenz-63 trajectories")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON object with any of: " + ", ".join(GEN_DATA_DEFAULTS))
    p.add_argument("--T", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--sigma-proc", type=float)
    p.add_argument("--sigma-obs", type=float)
    p.add_argument("--z0", type=float, nargs=3)
    p.add_argument("--saem", action="store_true", help="multi-sequence SAEM dataset instead")
    p.add_argument("--n-seq", type=int)
    p.add_argument("--z0-jitter", type=float)
    p.add_argument("--csv", action="store_true", help="also export CSV")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-itf", help="ITF training of an AL-RNN")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--tau", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--P", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--bptt-len", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_itf)

    def segment_args(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--start", type=int, default=0)
        p.add_argument("--length", type=int, default=200)
        p.add_argument("--out", required=True)

    p = sub.add_parser("fisher-itf", help="ITF Fisher proxy on a data segment")
    segment_args(p)
    p.add_argument("--tau", type=int, required=True)
    p.add_argument("--sigma-obs", type=float, required=True)
    p.set_defaults(func=cmd_fisher_itf)

    p = sub.add_parser("rbpf-louis", help="RBPF + Louis observed information on a data segment")
    segment_args(p)
    p.add_argument("--noise", help="JSON with sigma_proc, sigma_obs, sigma_g")
    p.add_argument("--sigma-proc", type=float)
    p.add_argument("--sigma-obs", type=float)
    p.add_argument("--sigma-g", type=float, default=0.1)
    p.add_argument("--particles", type=int, default=64)
    p.add_argument("--draws", type=int, default=8)
    p.add_argument("--tau-ess", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rbpf_louis)

    p = sub.add_parser("toy-louis", help="gate-noise sweep of the two-regime toy")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--T", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_louis)

    p = sub.add_parser("saem", help="particle-SAEM fine-tuning of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", nargs="+", help="sequence bundles or a gen-data --saem directory; "
                   "default: generate from the config's saem_data section")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--L", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_saem)

    p = sub.add_parser("eval-qoi", help="D_stsp and largest Lyapunov exponent of checkpoints")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--data", required=True, help="reference bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--T", type=int)
    p.set_defaults(func=cmd_eval_qoi)

    p = sub.add_parser("mismatch", help="matrix-aware curvature diagnostics")
    p.add_argument("--itf", required=True, help="per-step ITF Fisher matrix")
    p.add_argument("--obs", required=True, help="window-summed observed information")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mismatch)

    p = sub.add_parser("analyze", help="per-sigma_proc rank association of H_c and g_Q")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-boot", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("emit-plots", help="tidy per-panel CSVs from a results directory")
    p.add_argument("results")
    p.set_defaults(func=cmd_emit_plots)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        for ptr, msg in exc.errors:
            print(f"config error at {ptr or '/'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except harness.MissingArtifacts as exc:
        for m in exc.missing:
            print(f"missing: {m}", file=sys.stderr)
        return EXIT_IO
    except (OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
