"""Command-line entry point: gen, train, infer, eval, bench, gradcheck.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

from . import gradcheck, pipeline, synthvid
from .bench import run_bench
from .errors import CheckpointError, ConfigError, MalformedFileError
from .pipeline import TrainConfig


class RuntimeFailure(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _size(text):
    v = _positive_int(text)
    if v % 8:
        raise argparse.ArgumentTypeError(f"size {v} is not divisible by 8")
    return v


def _split_list(text):
    try:
        out = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split list {text!r}") from None
    if not out or any(s < 1 for s in out):
        raise argparse.ArgumentTypeError(f"bad split list {text!r}")
    return out


def cmd_gen(args, parser):
    videos = synthvid.make_dataset(args.videos, args.frames, args.size, args.seed)
    try:
        synthvid.write_dataset(videos, args.out)
    except OSError as e:
        raise RuntimeFailure(f"cannot write dataset to {args.out}: {e}") from e
    print(json.dumps({"out": str(args.out), "videos": len(videos), "frames": args.frames,
                      "size": args.size, "seed": args.seed}, sort_keys=True))
    return 0


def cmd_train(args, parser):
    try:
        cfg = TrainConfig(episodes=args.episodes, batch=args.batch, lam=args.lam, splits=args.splits,
                          c_out=args.cdim, lr=args.lr, seed=args.seed,
                          checkpoint_every=args.checkpoint_every)
    except ConfigError as e:
        parser.error(str(e))
    try:
        dataset = synthvid.read_dataset(args.data)
    except (OSError, MalformedFileError, KeyError) as e:
        raise RuntimeFailure(f"cannot read dataset {args.data}: {e}") from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    with open(out / "metrics.jsonl", "w") as metrics:
        def log(rec):
            metrics.write(json.dumps(rec, sort_keys=True) + "\n")

        try:
            params = pipeline.train(dataset, cfg, log=log, checkpoint_path=ckpt)
        except pipeline.TrainingError as e:
            raise RuntimeFailure(f"training failed at step {e.step}: {e}") from e
    pipeline.save_checkpoint(ckpt, params, cfg)
    print(json.dumps({"checkpoint": str(ckpt), "steps": cfg.episodes // cfg.batch}, sort_keys=True))
    return 0


def _load(path):
    try:
        return pipeline.load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise RuntimeFailure(f"cannot load checkpoint {path}: {e}") from e


def cmd_infer(args, parser):
    params, cfg = _load(args.ckpt)
    try:
        video = synthvid.read_video_dir(args.video_dir, require_masks=False)
    except (OSError, MalformedFileError) as e:
        raise RuntimeFailure(str(e)) from e
    if len(video.frames) < 2:
        raise RuntimeFailure(f"{args.video_dir}: need at least two frames")
    if video.frames[0].mask is None:
        raise RuntimeFailure(f"{args.video_dir}: missing first-frame mask mask_0000.pgm")
    masks = pipeline.infer_video(params, video.frames, video.frames[0].mask, cfg.ridge())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(masks, start=1):
        synthvid.write_pgm(out / f"pred_{t:04d}.pgm", m)
    print(json.dumps({"out": str(out), "masks": len(masks)}, sort_keys=True))
    return 0


def _read_predictions(pred_root, dataset):
    preds = {}
    for video in dataset:
        vdir = Path(pred_root) / video.video_id
        preds[video.video_id] = [synthvid.read_pgm(vdir / f"pred_{t:04d}.pgm")
                                 for t in range(1, len(video.frames))]
    return preds


def cmd_eval(args, parser):
    if (args.ckpt is None) == (args.pred is None):
        parser.error("give exactly one of --ckpt or --pred")
    try:
        dataset = synthvid.read_dataset(args.data)
    except (OSError, MalformedFileError, KeyError) as e:
        raise RuntimeFailure(f"cannot read dataset {args.data}: {e}") from e
    for video in dataset:
        if len(video.frames) < 2:
            raise RuntimeFailure(f"{video.video_id}: need at least two frames")
    try:
        if args.ckpt is not None:
            params, cfg = _load(args.ckpt)
            report = pipeline.evaluate(params, dataset, cfg.ridge())
        else:
            report = pipeline.score_predictions(dataset, _read_predictions(args.pred, dataset))
    except (OSError, MalformedFileError) as e:
        raise RuntimeFailure(str(e)) from e

    ranked = report.sorted_videos()
    for vid, j in ranked:
        print(json.dumps({"video": vid, "J": j}, sort_keys=True))
    print(json.dumps(report.to_dict(), sort_keys=True))
    print(f"{'video':<14} {'J':>7}", file=sys.stderr)
    for vid, j in ranked:
        print(f"{vid:<14} {j:>7.4f}", file=sys.stderr)
    print(f"{'mean':<14} {report.j_mean:>7.4f}", file=sys.stderr)
    return 0


def cmd_bench(args, parser):
    bad = [s for s in args.splits if args.cdim % s]
    if bad:
        parser.error(f"--cdim {args.cdim} is not divisible by split(s) {bad}")
    result = run_bench(args.cdim, args.rows, args.splits, args.reps, args.lam, args.seed)
    print(result.format_table())
    doc = json.dumps(result.to_dict(), sort_keys=True)
    print(doc)
    if args.json:
        Path(args.json).write_text(doc + "\n")
    return 0


def cmd_gradcheck(args, parser):
    if args.cdim % args.splits:
        parser.error(f"--cdim {args.cdim} is not divisible by --splits {args.splits}")
    failed = []
    for name, err, tol in gradcheck.run_all(args.cdim, args.splits, args.seed):
        ok = err < tol
        print(f"{'ok  ' if ok else 'FAIL'} {name:<36} max_rel_err={err:.3e} tol={tol:.0e}")
        if not ok:
            failed.append(name)
    if failed:
        print("gradient check failed for: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ridgevos", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic video dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=_positive_int, default=25)
    g.add_argument("--frames", type=_positive_int, default=12)
    g.add_argument("--size", type=_size, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="episodic meta-training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="directory for model.ckpt and metrics.jsonl")
    t.add_argument("--episodes", type=_nonneg_int, default=2000)
    t.add_argument("--batch", type=_positive_int, default=1)
    t.add_argument("--lambda", dest="lam", type=float, default=5.0)
    t.add_argument("--splits", type=_positive_int, default=2)
    t.add_argument("--cdim", type=_positive_int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=_nonneg_int, default=0)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="segment one video from its first-frame mask")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video-dir", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="mean IoU (J) per video and overall")
    e.add_argument("--ckpt")
    e.add_argument("--pred", help="score saved predictions <pred>/<video_id>/pred_####.pgm instead")
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time block-split ridge fit + predict")
    b.add_argument("--cdim", type=_positive_int, default=800)
    b.add_argument("--rows", type=_positive_int, default=4096)
    b.add_argument("--splits", type=_split_list, default=[1, 2, 4, 8])
    b.add_argument("--reps", type=_positive_int, default=10)
    b.add_argument("--lambda", dest="lam", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--json", help="also write the result JSON here")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference checks of all backward passes")
    c.add_argument("--cdim", type=_positive_int, default=8)
    c.add_argument("--splits", type=_positive_int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except RuntimeFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
