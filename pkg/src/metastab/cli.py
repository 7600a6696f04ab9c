"""``stab`` command-line interface.

Every subcommand prints the paths it wrote as its final output line. Exit
codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, GlobalConfig

log = logging.getLogger("metastab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad or missing command-line input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(args, *flags):
    for flag in flags:
        if getattr(args, flag.lstrip("-").replace("-", "_"), None) is None:
            raise UsageError(f"the following argument is required: {flag}")


def write_report(path, report: dict) -> Path:
    from .checkpoint import atomic_write

    text = json.dumps(report, sort_keys=True, indent=2, default=_json_default) + "\n"
    return atomic_write(path, text.encode("utf-8"))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _config(args, overrides: dict | None = None) -> GlobalConfig:
    overrides = dict(overrides or {}, jobs=getattr(args, "jobs", None))
    cfg = GlobalConfig.resolve(getattr(args, "config", None), overrides, getattr(args, "set", None))
    import torch

    if cfg.get("jobs") < 1:
        raise ConfigError("jobs must be >= 1")
    torch.set_num_threads(cfg.get("jobs"))
    torch.manual_seed(cfg.get("seed"))
    return cfg


def _flow(cfg):
    from .flow import RigidFlowProvider

    f = cfg.section("flow")
    return RigidFlowProvider(levels=f["levels"], iters=f["iters"], min_size=f["min_size"])


def _fx(cfg):
    from .losses import RandomFeatureExtractor

    return RandomFeatureExtractor(tuple(cfg.get("losses.feature_channels")), seed=cfg.get("seed"))


def _maybe_affine(path):
    if path is None:
        return None
    from .affine import load_estimator

    return load_estimator(path)


GENERIC_DIRS = {"unstable", "stable", "frames"}


def _video_id(path) -> str:
    """Directory name, qualified by its parent for the generic names of a paired dataset."""
    p = Path(path)
    return f"{p.parent.name}/{p.name}" if p.name in GENERIC_DIRS and p.parent.name else p.name


def _load_video(path):
    from .data import load_frames

    return load_frames(path).frames


def _provenance(cfg, checkpoints: dict | None = None) -> dict:
    from .checkpoint import load

    ck = {}
    for name, p in sorted((checkpoints or {}).items()):
        if p is None:
            continue
        header, _ = load(p)
        ck[name] = {"file": Path(p).name, "arch": header["arch"], "payload_sha256": header["payload_sha256"]}
    return {"seeds": {"run": cfg.get("seed")}, "checkpoints": ck}


# ----------------------------------------------------------------- commands
def cmd_synth(args):
    from .data import JitterSpec, save_paired_dataset, synthetic_suite

    cfg = _config(args, {"seed": args.seed})
    spec = JitterSpec(rot_deg=args.rot_deg, trans_px=args.trans_px, bands=(args.band_lo, args.band_hi),
                      bursts=args.bursts)
    ds = synthetic_suite(args.videos, n_frames=args.frames, size=args.size, spec=spec,
                         seed=cfg.get("seed"))
    return [save_paired_dataset(ds, args.out)]


def cmd_train_affine(args):
    from .affine import AffineEstimator, save_estimator
    from .data import load_images, texture_corpus

    over = {"affine.iters": args.iters, "seed": args.seed}
    cfg = _config(args, over)
    if args.data is not None:
        images = load_images(args.data)
    elif args.synthetic:
        images = texture_corpus(args.synthetic, size=128, seed=cfg.get("seed"))
    else:
        raise UsageError("one of --data or --synthetic is required")
    est = AffineEstimator(**cfg.section("affine"), seed=cfg.get("seed")).fit(images)
    out = save_estimator(args.out, est, meta={"config": cfg.as_dict()})
    paths = [out]
    if args.plot:
        paths.append(_plot_curve(est.loss_curve_, Path(args.out).with_suffix(".loss.png"), "affine training loss"))
    return paths


def _meta_config(cfg):
    from .meta import MetaConfig

    m, lo = cfg.section("meta"), cfg.section("losses")
    return MetaConfig(alpha=m["alpha"], beta=m["beta"], M=m["M"], r=m["r"], k=cfg.get("stabilizer.k"),
                      batch_tasks=m["batch_tasks"], iterations=m["iterations"], first_order=m["first_order"],
                      fresh_outer_clip=m["fresh_outer_clip"], lambda_s_in=lo["lambda_s_in"],
                      lambda_q_in=lo["lambda_q_in"], lambda_s_out=lo["lambda_s_out"],
                      lambda_q_out=lo["lambda_q_out"], seed=cfg.get("seed"))


def cmd_meta_train(args):
    from .data import load_paired_dataset
    from .meta import meta_train
    from .stabilizer import ToyStabilizer, load_model, save_model

    cfg = _config(args, {"meta.alpha": args.alpha, "meta.beta": args.beta, "meta.M": args.M, "meta.r": args.r,
                         "stabilizer.k": args.k, "meta.iterations": args.iters, "seed": args.seed})
    ds = load_paired_dataset(args.data)
    if args.init:
        model, _ = load_model(args.init)
    else:
        s = cfg.section("stabilizer")
        model = ToyStabilizer(k=s["k"], hidden=s["hidden"], recurrent=s["recurrent"], seed=cfg.get("seed"))
    est = _maybe_affine(args.affine)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.jsonl")
    from .checkpoint import atomic_write

    import io

    buf = io.StringIO()
    records = meta_train(model, ds, _meta_config(cfg), _flow(cfg), _fx(cfg), est, log_file=buf)
    atomic_write(log_path, buf.getvalue().encode("utf-8"))
    out = save_model(args.out, model, meta={"run": cfg.as_dict()})
    paths = [out, log_path]
    if args.plot:
        curve = [r["outer_loss_breakdown"]["total"] for r in records]
        paths.append(_plot_curve(curve, Path(args.out).with_suffix(".outer.png"), "outer loss"))
    return paths


def _adapt_config(cfg):
    from .core import AdaptationConfig

    a, lo = cfg.section("adapt"), cfg.section("losses")
    return AdaptationConfig(M=a["M"], alpha=a["alpha"], p=a["p"], count=a["count"], strategy=a["strategy"],
                            seed=cfg.get("seed"), lambda_s_in=lo["lambda_s_in"], lambda_q_in=lo["lambda_q_in"],
                            lambda_rec=lo["lambda_rec"], r=cfg.get("meta.r"), k=cfg.get("stabilizer.k"),
                            centered=a["centered"])


def cmd_adapt(args):
    from .data import save_frames
    from .meta import meta_inference
    from .metrics import stability_score
    from .stabilizer import load_model, save_model

    _require(args, "--ckpt", "--video", "--out")
    if not Path(args.ckpt).is_file():
        raise UsageError(f"--ckpt: no such checkpoint {args.ckpt}")
    model, _ = load_model(args.ckpt)
    cfg = _config(args, {"adapt.strategy": args.strategy, "adapt.p": args.p, "adapt.M": args.M,
                         "adapt.count": args.count, "adapt.alpha": args.alpha, "meta.r": args.r,
                         "stabilizer.k": model.k, "seed": args.seed, "adapt.centered": args.centered})
    acfg = _adapt_config(cfg)
    video = _load_video(args.video)
    est = _maybe_affine(args.affine)
    result = meta_inference(model, video, acfg, _flow(cfg), _fx(cfg), est)
    out = Path(args.out)
    frames_dir = save_frames(result.video, out / "frames")
    params_path = save_model(out / "adapted.ckpt", model, params=result.params,
                             meta={"label": result.label, "video": _video_id(args.video)})
    report = {
        "video_id": _video_id(args.video),
        "label": result.label,
        "config": cfg.as_dict(),
        "adaptation": {"gradient_steps": result.steps, "clip_starts": result.clip_starts,
                       "peaks": result.peaks, "low_signal": result.low_signal,
                       "losses": [round(x["loss"], 10) for x in result.losses]},
        "metrics": {"stability": stability_score(result.video, est, _flow(cfg))},
        "provenance": _provenance(cfg, {"model": args.ckpt, "affine": args.affine, "adapted": params_path}),
    }
    rep = write_report(out / "report.json", report)
    return [frames_dir, params_path, rep]


def cmd_stabilize(args):
    from .data import save_frames
    from .stabilizer import load_model, sliding_stabilize

    if args.ckpt is None:
        raise UsageError("the following argument is required: --ckpt (a stabilizer checkpoint)")
    if not Path(args.ckpt).is_file():
        raise UsageError(f"--ckpt: no such checkpoint {args.ckpt}")
    _require(args, "--video", "--out")
    _config(args)
    model, _ = load_model(args.ckpt)
    out = sliding_stabilize(model, _load_video(args.video), recurrent=True if args.recurrent else None)
    return [save_frames(out, args.out)]


def cmd_eval(args):
    from .metrics import AVAILABLE_METRICS, Detection, FeatureHomographyFit, evaluate

    _require(args, "--orig", "--stab", "--report")
    cfg = _config(args)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in AVAILABLE_METRICS]
    if bad:
        raise UsageError(f"--metrics: unknown metric(s) {', '.join(bad)}; choose from {', '.join(AVAILABLE_METRICS)}")
    dets = None
    if args.detections:
        dets = [Detection.from_dict(d) for d in json.loads(Path(args.detections).read_text())]
    m = cfg.section("metrics")
    rep = evaluate(_load_video(args.orig), _load_video(args.stab), metrics, flow=_flow(cfg),
                   est=_maybe_affine(args.affine), hfit=FeatureHomographyFit(min_inliers=m["min_inliers"]),
                   detections=dets, persistence_iou=m["persistence_iou"],
                   temporal_match_iou=m["temporal_iou_match"])
    report = {"video_id": _video_id(args.stab), "config": cfg.as_dict(), "metrics": rep.as_dict(),
              "provenance": _provenance(cfg, {"affine": args.affine})}
    paths = [write_report(args.report, report)]
    if args.plot and "stability" in metrics:
        paths.append(_plot_spectra(_load_video(args.stab), cfg, Path(args.report).with_suffix(".spectra.png")))
    return paths


def cmd_jerk(args):
    from .checkpoint import atomic_write
    from .core import format_trajectory_csv, trajectory_from_array
    from .flow import frame_diagonal
    from .jerk import clip_starts, jerk_profile, select_peaks
    from .metrics import accumulate, pair_motions

    _require(args, "--video", "--out")
    cfg = _config(args, {"adapt.p": args.peaks, "stabilizer.k": args.k, "adapt.raw_units": args.raw_units or None})
    video = _load_video(args.video)
    motions = pair_motions(video, _flow(cfg), _maybe_affine(args.affine))
    h, w = video.shape[1:3]
    profile = jerk_profile(motions, diag=frame_diagonal(h, w), raw_units=cfg.get("adapt.raw_units"))
    p, k = cfg.get("adapt.p"), cfg.get("stabilizer.k")
    peaks = select_peaks(profile, p, k)
    traj = trajectory_from_array(accumulate(motions))
    out = atomic_write(args.out, format_trajectory_csv(traj).encode("utf-8"))
    prof_path = Path(args.profile) if args.profile else Path(args.out).with_name("jerk.csv")
    lines = ["t,delta"] + [f"{i + 1},{d!r}" for i, d in enumerate(profile.deltas.tolist())]
    atomic_write(prof_path, ("\n".join(lines) + "\n").encode("utf-8"))
    q = cfg.get("meta.r") + 2 * k
    peaks_path = Path(args.peaks_out) if args.peaks_out else Path(args.out).with_name("peaks.json")
    starts = clip_starts(peaks, len(video), q, cfg.get("adapt.centered"))
    write_report(peaks_path, {"video_id": _video_id(args.video), "peaks": peaks, "clip_starts": starts,
                              "low_signal": profile.low_signal, "config": cfg.as_dict()})
    paths = [out, prof_path, peaks_path]
    if args.plot:
        paths.append(_plot_jerk(profile, peaks, Path(args.out).with_suffix(".jerk.png")))
    return paths


def cmd_judge(args):
    from .judge import (HttpCaptioner, HttpDetector, HttpJudge, JudgeConfig, MockCaptioner, MockDetector,
                        MockJudge, judge_run)

    _require(args, "--videos", "--out")
    cfg = _config(args)
    videos = {}
    for p in args.videos:
        vid = _video_id(p)
        if vid in videos:
            raise UsageError(f"--videos: duplicate video id {vid!r}")
        videos[vid] = _load_video(p)
    if args.mock:
        captioner, detector, judge = MockCaptioner(), MockDetector(), MockJudge()
    else:
        captioner, detector, judge = HttpCaptioner(), HttpDetector(), HttpJudge()
    j = cfg.section("judge")
    report = judge_run(videos, captioner, detector, judge,
                       JudgeConfig(stride=j["stride"], threshold=j["threshold"], attempts=j["attempts"]))
    d = report.as_dict()
    d["run_config"] = cfg.as_dict()
    return [write_report(args.out, d)]


# ------------------------------------------------------------------ plots
def _plt():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - optional extra
        raise UsageError("--plot needs matplotlib (pip install metastab[plot])") from exc
    return plt


def _plot_curve(values, path, title):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(values)
    ax.set_title(title)
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _plot_jerk(profile, peaks, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 3))
    t = np.arange(1, len(profile.deltas) + 1)
    ax.plot(t, profile.deltas, lw=1)
    ax.scatter([i + 1 for i in peaks], profile.deltas[peaks], color="red", zorder=3)
    ax.set_xlabel("frame")
    ax.set_ylabel("jerk magnitude")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _plot_spectra(video, cfg, path):
    from .metrics import accumulate, pair_motions

    plt = _plt()
    traj = accumulate(pair_motions(video, _flow(cfg)))
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, j, name in zip(axes, range(3), ("rotation", "x", "y")):
        e = np.abs(np.fft.rfft(traj[:, j])) ** 2
        ax.bar(np.arange(1, len(e)), e[1:])
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# ------------------------------------------------------------------ parser
def _count(text: str):
    if text == "all":
        return "all"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $STAB_CONFIG)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--jobs", type=int, help="worker thread cap")
    common.add_argument("--plot", action="store_true", help="also write static plots")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="stab", description="Meta-adaptive video stabilization toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="write a synthetic paired dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=4)
    s.add_argument("--frames", type=int, default=48)
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--rot-deg", type=float, default=1.0)
    s.add_argument("--trans-px", type=float, default=2.0)
    s.add_argument("--band-lo", type=int, default=10)
    s.add_argument("--band-hi", type=int, default=20)
    s.add_argument("--bursts", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-affine", parents=[common], help="train the flow-to-affine estimator")
    s.add_argument("--data", help="directory of training images")
    s.add_argument("--synthetic", type=int, help="train on N generated textures instead of --data")
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_affine)

    s = sub.add_parser("meta-train", parents=[common], help="meta-train a stabilizer on paired videos")
    s.add_argument("--data", required=True, help="paired dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="JSON-lines training log path")
    s.add_argument("--init", help="start from this stabilizer checkpoint")
    s.add_argument("--affine", help="affine estimator checkpoint (default: direct registration)")
    s.add_argument("--iters", type=int)
    for flag, typ in (("--alpha", float), ("--beta", float), ("--M", int), ("--r", int), ("--k", int),
                      ("--seed", int)):
        s.add_argument(flag, type=typ)
    s.set_defaults(func=cmd_meta_train)

    s = sub.add_parser("adapt", parents=[common], help="test-time adaptation and stabilization")
    s.add_argument("--video")
    s.add_argument("--ckpt")
    s.add_argument("--out")
    s.add_argument("--affine")
    s.add_argument("--strategy", choices=("vanilla", "targeted"))
    s.add_argument("--centered", action="store_true", default=None)
    s.add_argument("--count", type=_count, help="random clips for vanilla adaptation, or 'all' for one pass")
    for flag, typ in (("--p", int), ("--M", int), ("--alpha", float), ("--r", int), ("--seed", int)):
        s.add_argument(flag, type=typ)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("stabilize", parents=[common], help="sliding-window stabilization")
    s.add_argument("--video")
    s.add_argument("--ckpt")
    s.add_argument("--out")
    s.add_argument("--recurrent", action="store_true")
    s.set_defaults(func=cmd_stabilize)

    s = sub.add_parser("eval", parents=[common], help="compute evaluation metrics")
    s.add_argument("--orig")
    s.add_argument("--stab")
    s.add_argument("--metrics", default="stability,cropping,distortion")
    s.add_argument("--detections", help="JSON detections of the stabilized video")
    s.add_argument("--affine")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("jerk", parents=[common], help="trajectory, jerk profile and peaks")
    s.add_argument("--video")
    s.add_argument("--out", help="trajectory CSV")
    s.add_argument("--profile", help="jerk CSV (default: jerk.csv next to --out)")
    s.add_argument("--peaks-out", help="peak JSON (default: peaks.json next to --out)")
    s.add_argument("--peaks", type=int, help="number of peaks p")
    s.add_argument("--k", type=int)
    s.add_argument("--raw-units", action="store_true")
    s.add_argument("--affine")
    s.set_defaults(func=cmd_jerk)

    s = sub.add_parser("judge", parents=[common], help="LLM-as-a-judge caption evaluation")
    s.add_argument("--videos", nargs="+")
    s.add_argument("--out")
    s.add_argument("--mock", action="store_true", help="use offline mock clients")
    s.set_defaults(func=cmd_judge)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        paths = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"stab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"stab {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(" ".join(str(p) for p in paths))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
