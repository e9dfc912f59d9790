"""``timebridge`` command line: prepare, train, sample, trend-sample, impute, eval.

Configuration is a flat ``key = value`` file (``#`` starts a comment).
Flags override the file. Every key is validated before any work starts.
Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data as D
from . import metrics as M
from . import priors as P
from . import sampler as SM
from . import schedule as S
from . import training as T
from .denoiser import PRESETS, Denoiser, DenoiserConfig, ModelError, load_checkpoint, save_checkpoint

logger = logging.getLogger("timebridge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return s
    return parse


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# per-dataset defaults, applied before the config file and flags
PROFILES = {
    "sines": {},
    "mujoco": {"train.n_steps": 14000, "schedule.beta_min": 0.1, "schedule.beta_d": 5.0, "prior.eta": 0.1},
    "etth": {"train.n_steps": 18000, "train.sigma_data": 0.1, "prior.eta": 0.5},
    "stocks": {"train.batch_size": 64, "train.n_steps": 10000, "train.sigma_data": 0.1, "prior.eta": 0.3},
    "energy": {"train.batch_size": 64, "train.n_steps": 25000, "train.sigma_data": 0.05},
    "fmri": {"train.batch_size": 64, "train.n_steps": 15000, "schedule.beta_min": 0.1, "schedule.beta_d": 2.0,
             "prior.eta": 0.1},
}
for _name, _over in PROFILES.items():
    _over.update({f"model.{k}": v for k, v in PRESETS[_name].items()})

# key -> (parser, default)
SCHEMA = {
    "profile": (_choice(*PROFILES), "sines"),
    "seed": (int, 0),
    "data.window": (int, 24),
    "data.stride": (int, 1),
    "data.train_frac": (float, 0.9),
    "data.skip_first_column": (_bool, False),
    "schedule.kind": (_choice("vp", "ve"), "vp"),
    "schedule.beta_min": (float, 0.2),
    "schedule.beta_d": (float, 10.0),
    "schedule.sigma_max": (float, 1.0),
    "schedule.t_max": (float, 1.0),
    "model.n_enc_layers": (int, 1),
    "model.n_dec_layers": (int, 2),
    "model.n_heads": (int, 4),
    "model.head_dim": (int, 16),
    "model.n_topk_freqs": (int, 3),
    "model.poly_degree": (int, 3),
    "train.batch_size": (int, 128),
    "train.n_steps": (int, 12000),
    "train.lr": (float, 8e-3),
    "train.warmup_steps": (int, 500),
    "train.lambda_fourier": (float, 1.0),
    "train.sigma_data": (float, 0.5),
    "train.grad_clip": (float, 1.0),
    "train.checkpoint_every": (int, 1000),
    "prior.kind": (_choice("standard", "data", "gp", "trend", "spline"), "data"),
    "prior.eta": (float, 1.0),
    "prior.length_scale": (_opt_float, None),
    "trend.kind": (_choice("linear", "poly3", "butterworth"), "linear"),
    "trend.cutoff": (float, 0.1),
    "mask.kind": (_choice("random", "geometric"), "random"),
    "mask.ratio": (float, 0.5),
    "mask.mean_segment": (float, 3.0),
    "sample.n": (int, 100),
    "sample.n_steps": (int, 40),
    "sample.churn": (float, 0.33),
    "sample.grid": (_choice("uniform", "power"), "uniform"),
    "sample.final_denoise": (_bool, False),
    "eval.steps": (int, 2000),
    "eval.batch_size": (int, 64),
}

# flag dest -> config key
FLAG_KEYS = {
    "profile": "profile",
    "seed": "seed",
    "window": "data.window",
    "steps": "train.n_steps",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "prior": "prior.kind",
    "n_samples": "sample.n",
    "gamma": "sample.n_steps",
    "churn": "sample.churn",
    "mask_ratio": "mask.ratio",
    "mask_kind": "mask.kind",
}


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = (value, f"{origin}:{lineno}")
    return out


def build_config(args) -> dict:
    """Defaults, then the profile's overrides, then the config file, ``--set`` pairs and flags."""
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = (v.strip(), "--set")
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            raw[key] = (str(val), f"--{dest.replace('_', '-')}")

    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if "profile" in raw:
        value, origin = raw.pop("profile")
        try:
            cfg["profile"] = SCHEMA["profile"][0](value)
        except ValueError as exc:
            raise UsageError(f"{origin}: bad value for profile: {exc}") from None
    cfg.update(PROFILES[cfg["profile"]])
    for key, (value, origin) in raw.items():
        if key not in SCHEMA:
            raise UsageError(f"{origin}: unknown config key {key!r}")
        try:
            cfg[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise UsageError(f"{origin}: bad value for {key}: {exc}") from None
    return cfg


def _set_threads(args):
    n = args.threads
    if n is None:
        env = os.environ.get("TIMEBRIDGE_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"TIMEBRIDGE_THREADS must be an integer, got {env!r}") from None
    n = 1 if n is None else n
    if n < 1:
        raise UsageError("--threads must be >= 1")
    torch.set_num_threads(n)
    return n


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _schedule(cfg) -> S.NoiseSchedule:
    return S.NoiseSchedule.from_config(cfg)


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_prepared(data_dir, split):
    d = Path(data_dir)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    batch = D.load_batch(_require_file(d / f"{split}.tbdat", f"{split} batch"))
    manifest = json.loads(_require_file(d / "manifest.json", "dataset manifest").read_text())
    return batch, manifest


# -- plotting ----------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def write_svg(path: Path, window: np.ndarray, title: str = "", width: int = 640, height: int = 320):
    """One polyline per feature, one vertex per timestamp."""
    tau, d = window.shape
    lo, hi = float(window.min()), float(window.max())
    span = hi - lo if hi > lo else 1.0
    pad = 20
    xs = pad + np.arange(tau) * (width - 2 * pad) / max(tau - 1, 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">']
    if title:
        parts.append(f'<title>{title}</title>')
    for j in range(d):
        ys = height - pad - (window[:, j] - lo) / span * (height - 2 * pad)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{_COLORS[j % len(_COLORS)]}" '
                     f'stroke-width="1.5" points="{pts}"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def write_samples_csv(path: Path, values: np.ndarray):
    n, tau, d = values.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "timestamp"] + [f"feature_{j}" for j in range(d)])
        for i in range(n):
            for k in range(tau):
                w.writerow([i, k] + [repr(float(v)) for v in values[i, k]])


# -- commands ----------------------------------------------------------------

def cmd_prepare(args, cfg):
    src = _require_file(args.input, "input CSV")
    out = _out_dir(args)
    series, names = D.load_csv(src, skip_first_column=cfg["data.skip_first_column"])
    train_s, test_s = D.chrono_split(series, cfg["data.train_frac"])
    norm = D.fit_normalization(train_s, names)
    tau, stride = cfg["data.window"], cfg["data.stride"]
    train_w = D.normalize(D.TimeSeriesBatch(D.window(train_s, tau, stride)), norm).values
    test_w = D.normalize(D.TimeSeriesBatch(D.window(test_s, tau, stride)), norm).values
    stats = P.fit_data_stats(train_w)
    D.save_batch(out / "train.tbdat", train_w)
    D.save_batch(out / "test.tbdat", test_w)
    D.save_norm(out / "norm.json", norm, names)
    _write_json(out / "stats.json", {"mu": stats.mu.tolist(), "sigma2": stats.sigma2.tolist()})
    manifest = {"source": src.name, "tau": tau, "d": len(names), "features": names,
                "n_train": len(train_w), "n_test": len(test_w), "stride": stride,
                "train_frac": cfg["data.train_frac"]}
    _write_json(out / "manifest.json", manifest)
    print(f"prepared {len(train_w)} train / {len(test_w)} test windows, tau={tau}, d={len(names)} -> {out}")


def _endpoint_fn(cfg, stats, seed):
    kind = cfg["prior.kind"]
    if kind == "trend":
        return T.trend_endpoints(cfg["trend.kind"], cfg["trend.cutoff"])
    if kind == "spline":
        return T.spline_endpoints(_mask_spec(cfg, seed))
    return T.unconditional_endpoints(_prior(cfg, stats))


def _prior(cfg, stats) -> P.Prior:
    return P.Prior(cfg["prior.kind"], stats, eta=cfg["prior.eta"], length_scale=cfg["prior.length_scale"],
                   shape=stats.shape)


def _mask_spec(cfg, seed) -> D.MaskSpec:
    return D.MaskSpec(cfg["mask.kind"], cfg["mask.ratio"], cfg["mask.mean_segment"], seed)


def cmd_train(args, cfg):
    x, manifest = _load_prepared(args.data, "train")
    out = _out_dir(args)
    seed = cfg["seed"]
    torch.manual_seed(seed)
    mcfg = DenoiserConfig(window_len=x.shape[1], n_features=x.shape[2], n_enc_layers=cfg["model.n_enc_layers"],
                          n_dec_layers=cfg["model.n_dec_layers"], n_heads=cfg["model.n_heads"],
                          head_dim=cfg["model.head_dim"], n_topk_freqs=cfg["model.n_topk_freqs"],
                          poly_degree=cfg["model.poly_degree"])
    model = Denoiser(mcfg)
    tcfg = T.TrainConfig(batch_size=cfg["train.batch_size"], n_steps=cfg["train.n_steps"],
                         lr_warmup_peak=cfg["train.lr"], warmup_steps=cfg["train.warmup_steps"],
                         lambda_fourier=cfg["train.lambda_fourier"], sigma_data=cfg["train.sigma_data"],
                         grad_clip=cfg["train.grad_clip"], seed=seed,
                         checkpoint_every=cfg["train.checkpoint_every"])
    stats = P.fit_data_stats(x)
    res = T.train(model, x, tcfg, _endpoint_fn(cfg, stats, seed), _schedule(cfg), out_dir=out)
    # re-save with everything the sampling commands need
    extra = {"config": cfg, "stats": {"mu": stats.mu.tolist(), "sigma2": stats.sigma2.tolist()},
             "dataset": manifest}
    save_checkpoint(out / "checkpoint.tbrg", res.model, res.step, res.optimizer,
                    res.rng.bit_generator.state, extra)
    final = res.history[-1][1] if res.history else float("nan")
    rate = res.step / res.seconds if res.seconds > 0 else float("inf")
    print(f"final loss {final:.6g} after {res.step} steps ({rate:.2f} steps/s)")


def _load_model(args, cfg):
    path = _require_file(args.checkpoint, "checkpoint")
    model, payload = load_checkpoint(path)
    model.eval()
    extra = payload.get("extra") or {}
    st = extra.get("stats")
    stats = P.DataStats(np.asarray(st["mu"]), np.asarray(st["sigma2"])) if st else None
    return model, extra, stats


def _sampler_cfg(cfg) -> SM.SamplerConfig:
    return SM.SamplerConfig(n_steps=cfg["sample.n_steps"], churn=cfg["sample.churn"], grid=cfg["sample.grid"],
                            final_denoise=cfg["sample.final_denoise"])


def _check_shape(model, shape):
    want = (model.cfg.window_len, model.cfg.n_features)
    if tuple(shape) != want:
        raise ModelError(f"checkpoint expects windows of shape {want}, got {tuple(shape)}")


def _emit(out: Path, values, res: SM.SampleResult, cfg, kind: str, args, extra=None):
    n = values.shape[0]
    D.save_batch(out / "samples.tbdat", values)
    write_samples_csv(out / "samples.csv", values)
    manifest = {"prior": kind, "n_steps": cfg["sample.n_steps"], "churn": cfg["sample.churn"],
                "seed": cfg["seed"], "nfe": res.nfe, "n_samples": n,
                "ms_per_sample": res.wall_ms / max(n, 1), "config": cfg}
    manifest.update(extra or {})
    _write_json(out / "manifest.json", manifest)
    if args.plot:
        write_svg(out / "plot.svg", values[0], title=f"{kind} sample 0")
    print(f"wrote {n} samples to {out} (NFE {res.nfe}, {manifest['ms_per_sample']:.2f} ms/sample)")


def cmd_sample(args, cfg):
    model, extra, stats = _load_model(args, cfg)
    out = _out_dir(args)
    kind = cfg["prior.kind"]
    if kind in ("trend", "spline"):
        raise UsageError(f"prior {kind!r} needs observations; use trend-sample or impute")
    if stats is None:
        raise D.DataError("checkpoint carries no data statistics")
    _check_shape(model, stats.shape)
    rng = np.random.default_rng(cfg["seed"])
    res = SM.sample_unconditional(model.denoise, _schedule(cfg), _prior(cfg, stats), _sampler_cfg(cfg), rng,
                                  n=cfg["sample.n"])
    _emit(out, res.x0, res, cfg, kind, args)


def cmd_trend_sample(args, cfg):
    model, extra, _ = _load_model(args, cfg)
    x, _ = _load_prepared(args.data, args.split)
    out = _out_dir(args)
    _check_shape(model, x.shape[1:])
    x = x[: cfg["sample.n"]]
    trend = P.extract_trend(x, cfg["trend.kind"], cfg["trend.cutoff"])
    rng = np.random.default_rng(cfg["seed"])
    res = SM.bridge_sample(model.denoise, _schedule(cfg), trend, _sampler_cfg(cfg), rng)
    _emit(out, res.x0, res, cfg, f"trend:{cfg['trend.kind']}", args)


def cmd_impute(args, cfg):
    model, extra, _ = _load_model(args, cfg)
    x, _ = _load_prepared(args.data, args.split)
    out = _out_dir(args)
    _check_shape(model, x.shape[1:])
    x = x[: cfg["sample.n"]]
    if args.mask_file:
        mask = D.load_batch(_require_file(args.mask_file, "mask file"))[: len(x)]
        if mask.shape != x.shape:
            raise D.DataError(f"mask shape {mask.shape} does not match data {x.shape}")
        if not np.isin(mask, (0.0, 1.0)).all():
            raise D.DataError("mask file must be binary")
    else:
        mask = D.make_mask(x.shape, _mask_spec(cfg, cfg["seed"]))
    if not mask.any():
        raise M.MetricError("mask selects no cells; imputation error is undefined")
    endpoint = P.spline_interpolate(x, 1.0 - mask)
    rng = np.random.default_rng(cfg["seed"])
    res = SM.sample_point_preserving(model.denoise, _schedule(cfg), endpoint, mask, _sampler_cfg(cfg), rng)
    mse, mae = M.imputation_error(x, res.x0, mask)
    base_mse, base_mae = M.imputation_error(x, endpoint.values, mask)
    D.save_batch(out / "mask.tbdat", mask)
    _emit(out, res.x0, res, cfg, "spline", args,
          {"mse": mse, "mae": mae, "spline_mse": base_mse, "spline_mae": base_mae})
    print(f"masked-cell MSE {mse:.6g}  MAE {mae:.6g}  (spline only: {base_mse:.6g} / {base_mae:.6g})")


def cmd_eval(args, cfg):
    real = D.load_batch(_require_file(args.real, "real batch"))
    synth = D.load_batch(_require_file(args.synth, "synthetic batch"))
    out = _out_dir(args)
    mcfg = M.ModelEvalConfig(steps=cfg["eval.steps"], batch_size=cfg["eval.batch_size"], seed=cfg["seed"])
    rep = M.evaluate(real, synth, seed=cfg["seed"], model_cfg=mcfg)
    rep.extra["model_eval"] = asdict(mcfg)
    (out / "report.json").write_text(rep.to_json() + "\n")
    print(rep.table())


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="timebridge", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out-dir", required=True, help="every output goes here")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", help=f"dataset defaults: {', '.join(PROFILES)}")
    common.add_argument("--threads", type=int, help="torch thread cap (fallback: TIMEBRIDGE_THREADS, else 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--checkpoint", required=True)
    sampling.add_argument("--gamma", type=int, help="sampler steps")
    sampling.add_argument("--churn", type=float)
    sampling.add_argument("--n-samples", type=int)
    sampling.add_argument("--plot", action="store_true", help="also write plot.svg of the first sample")

    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("prepare", parents=[common], help="window and normalize a CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--window", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a bridge denoiser")
    sp.add_argument("--data", required=True, help="prepared dataset directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--prior")

    sp = sub.add_parser("sample", parents=[common, sampling], help="unconditional generation")
    sp.add_argument("--prior")

    for name, hlp in (("trend-sample", "generation from trends of real windows"),
                      ("impute", "fill masked cells of real windows")):
        sp = sub.add_parser(name, parents=[common, sampling], help=hlp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", choices=("train", "test"), default="test")
        if name == "impute":
            sp.add_argument("--mask-file", help="TBDAT1 batch of 0/1, 1 = impute")
            sp.add_argument("--mask-ratio", type=float)
            sp.add_argument("--mask-kind")

    sp = sub.add_parser("eval", parents=[common], help="score synthetic against real windows")
    sp.add_argument("--real", required=True)
    sp.add_argument("--synth", required=True)
    return p


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "sample": cmd_sample,
            "trend-sample": cmd_trend_sample, "impute": cmd_impute, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        _set_threads(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"timebridge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, M.MetricError, ModelError) as exc:
        print(f"timebridge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.TrainingError, SM.SamplerError, S.ScheduleDomainError, FloatingPointError) as exc:
        print(f"timebridge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invalid parameter combinations caught by library constructors
        print(f"timebridge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
