"""Command-line pipeline: gen -> sample-pairs -> train -> distances -> nms
-> eval -> report.

Every subcommand is deterministic given identical inputs and --seed. A
--config file holds key=value pairs (dest names, dashes allowed); flags on
the command line win. CROWDNMS_THREADS mirrors --threads.
"""

import argparse
import csv
import json
import os
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import evaluation, io, pairs, scene, suppress
from .embed import EmbedConfig, EmbeddingModel, TrainConfig, infer_distance_matrix, train
from .scene import SceneConfig


def _parse_range(text: str) -> tuple[float, float]:
    lo, hi = (float(t) for t in text.split(":"))
    return lo, hi


def _parse_sweep(text: str) -> list[float]:
    """START:STOP:STEP inclusive sweep, or a comma list."""
    if "," in text:
        return [float(t) for t in text.split(",")]
    parts = [float(t) for t in text.split(":")]
    if len(parts) == 1:
        return parts
    start, stop, step = parts if len(parts) == 3 else (*parts, 0.05)
    out = []
    v = start
    while v <= stop + 1e-9:
        out.append(round(v, 10))
        v += step
    return out


def _default_threads() -> int:
    env = os.environ.get("CROWDNMS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _thread_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen(args) -> int:
    cfg = SceneConfig(
        n_scenes=args.scenes,
        objects_per_scene=(int(args.objects.split(":")[0]), int(args.objects.split(":")[1])),
        occlusion_target=_parse_range(args.occlusion),
        proposals_per_object=args.proposals_per_object,
        channels=args.channels,
        width=args.width,
        height=args.height,
        stride=args.stride,
        seed=args.seed,
    )
    scenes = scene.generate_corpus(cfg)
    io.write_corpus(args.out_dir, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out_dir}")
    return 0


def cmd_sample_pairs(args) -> int:
    scenes = io.read_corpus(args.corpus)
    cfg = pairs.SamplingConfig(
        pairs_per_image=args.pairs_per_image,
        match_thr=args.match_thr,
        nms_thr=args.nt,
        roi_size=args.roi_size,
        seed=args.seed,
    )
    rows = []
    for s in scenes:
        for ps in pairs.sample_training_pairs(s, cfg):
            rows.append(
                {"image_id": ps.image_id, "i": ps.index_i, "j": ps.index_j,
                 "case_id": ps.label.case_id, "y": ps.label.y}
            )
    io.write_pair_rows(args.out, rows)
    print(f"wrote {len(rows)} pairs to {args.out}")
    return 0


def _load_pair_samples(corpus_dir, pairs_path, nt, match_thr, roi_size):
    scenes = {s.image_id: s for s in io.read_corpus(corpus_dir)}
    samples = []
    for r in io.read_pair_rows(pairs_path):
        s = scenes[r["image_id"]]
        i, j = int(r["i"]), int(r["j"])
        label = pairs.label_pair(s.proposals[i], s.proposals[j], s.gt, nt, match_thr)
        from .geometry import roi_align

        samples.append(
            pairs.PairSample(
                image_id=s.image_id, index_i=i, index_j=j,
                roi_i=roi_align(s.features, s.proposals[i].box, roi_size),
                roi_j=roi_align(s.features, s.proposals[j].box, roi_size),
                label=label,
            )
        )
    return samples


def cmd_train(args) -> int:
    samples = _load_pair_samples(args.corpus, args.pairs, args.nt, args.match_thr, args.roi_size)
    if not samples:
        print("error: no training pairs", file=sys.stderr)
        return 1
    channels = samples[0].roi_i.channels
    model = EmbeddingModel(
        EmbedConfig(in_channels=channels, width=args.model_width,
                    embedding_dim=args.emb_dim, roi_size=args.roi_size, head=args.head),
        seed=args.seed,
    )
    cfg = TrainConfig(
        learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, margin=args.margin, epochs=args.epochs, seed=args.seed,
    )
    trace = train(model, samples, cfg)
    io.save_checkpoint(args.out, model)
    for e, loss in enumerate(trace):
        print(f"epoch {e}: mean loss {loss:.6f}")
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_distances(args) -> int:
    scenes = io.read_corpus(args.corpus)
    if args.oracle:
        def compute(s):
            from .embed import DistanceMatrix
            from .geometry import iou_matrix
            import numpy as np

            dm = DistanceMatrix(image_id=s.image_id)
            if len(s.proposals) >= 2:
                ious = iou_matrix(s.proposals)
                for i, j in np.argwhere(np.triu(ious >= args.nt, k=1)):
                    dm.put(int(i), int(j),
                           scene.oracle_distance(s.proposals[int(i)], s.proposals[int(j)],
                                                 s, args.match_thr))
            return dm
    else:
        if not args.model:
            print("error: distances needs --model or --oracle", file=sys.stderr)
            return 2
        model = io.load_checkpoint(args.model)

        def compute(s):
            return infer_distance_matrix(model, s, args.nt)

    matrices = _thread_map(compute, scenes, args.threads)
    matrices.sort(key=lambda dm: dm.image_id)
    io.write_distances(args.out, matrices)
    print(f"wrote distances for {len(matrices)} images to {args.out}")
    return 0


def cmd_nms(args) -> int:
    method = args.method.replace("-", "_")
    try:
        cfg = suppress.SuppressionConfig(
            method=method, nt=args.nt, dt=args.dt, sigma=args.sigma, theta=args.theta
        )
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    if method == "pairwise" and not args.distances:
        print("usage error: --method pairwise requires --distances", file=sys.stderr)
        return 2
    props = io.read_proposals(args.proposals)
    by_image = defaultdict(list)
    for p in props:
        by_image[p.image_id].append(p)

    distances = {}
    if method == "pairwise":
        distances = io.read_distances(args.distances)

    from .embed import DistanceMatrix

    def run_one(image_id):
        dm = distances.get(image_id, DistanceMatrix(image_id=image_id))
        return suppress.run(by_image[image_id], cfg, dm)

    ids = sorted(by_image)
    kept_lists = _thread_map(run_one, ids, args.threads)
    kept = [p for lst in kept_lists for p in lst]
    io.write_proposals(args.out, kept)
    print(f"kept {len(kept)} of {len(props)} proposals -> {args.out}")
    return 0


def _report_to_dict(report: evaluation.EvalReport, name: str) -> dict:
    return {
        "name": name,
        "mean_ap": report.mean_ap,
        "f1_et": report.f1_et,
        "per_threshold": [
            {"et": s.et, "tp": s.tp, "fp": s.fp, "dt": s.n_det, "gt": s.n_gt,
             "rec": s.recall, "prec": s.precision, "ap": s.ap, "pr_curve": s.pr_curve}
            for s in report.per_threshold
        ],
        "buckets": [
            {"lo": b.lo, "hi": b.hi, "tp": b.tp, "fp": b.fp, "fn": b.fn, "f1": b.f1}
            for b in report.buckets
        ],
        "rest_tp": report.rest_tp,
        "rest_fn": report.rest_fn,
    }


def cmd_eval(args) -> int:
    dets = io.read_proposals(args.detections)
    gts = io.read_gt(args.gt)
    ets = _parse_sweep(args.et)
    bucket_edges = _parse_sweep(args.buckets)
    buckets = tuple(zip(bucket_edges, bucket_edges[1:]))
    cfg = evaluation.EvalConfig(
        thresholds=tuple(ets), buckets=buckets, interpolation=args.interpolation
    )
    report = evaluation.evaluate(dets, gts, cfg, f1_et=args.f1_et)
    payload = _report_to_dict(report, args.name)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    if args.csv_dir:
        _write_eval_csvs(payload, Path(args.csv_dir))
    print(f"wrote report to {args.out}")
    return 0


def _write_eval_csvs(payload: dict, csv_dir: Path) -> None:
    csv_dir.mkdir(parents=True, exist_ok=True)
    with open(csv_dir / "ap.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["et", "tp", "fp", "dt", "gt", "rec", "prec", "ap"])
        for s in payload["per_threshold"]:
            w.writerow([s["et"], s["tp"], s["fp"], s["dt"], s["gt"],
                        s["rec"], s["prec"], "" if s["ap"] is None else s["ap"]])
    with open(csv_dir / "f1_buckets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "tp", "fp", "fn", "f1"])
        for b in payload["buckets"]:
            w.writerow([b["lo"], b["hi"], b["tp"], b["fp"], b["fn"],
                        "" if b["f1"] is None else b["f1"]])
    for s in payload["per_threshold"]:
        with open(csv_dir / f"pr_curve_et{s['et']:.2f}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["recall", "precision"])
            w.writerows(s["pr_curve"])


def cmd_report(args) -> int:
    if args.names and len(args.names) != len(args.inputs):
        print("usage error: --names must match --inputs", file=sys.stderr)
        return 2
    payloads = []
    for k, path in enumerate(args.inputs):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if args.names:
            payload["name"] = args.names[k]
        payloads.append(payload)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [p["name"] for p in payloads]

    # AP vs evaluation threshold, one column per method, plus gain over first
    with open(out_dir / "ap_comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["et"] + names + [f"{n}_minus_{names[0]}" for n in names[1:]])
        base = {s["et"]: s["ap"] for s in payloads[0]["per_threshold"]}
        for s in payloads[0]["per_threshold"]:
            et = s["et"]
            row = [et]
            aps = []
            for p in payloads:
                ap = next((t["ap"] for t in p["per_threshold"] if t["et"] == et), None)
                aps.append(ap)
                row.append("" if ap is None else ap)
            for ap in aps[1:]:
                row.append("" if ap is None or base[et] is None else ap - base[et])
            w.writerow(row)

    with open(out_dir / "f1_comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo", "hi"] + names + [f"{n}_minus_{names[0]}" for n in names[1:]])
        for k, b in enumerate(payloads[0]["buckets"]):
            row = [b["lo"], b["hi"]]
            f1s = [p["buckets"][k]["f1"] if k < len(p["buckets"]) else None for p in payloads]
            row.extend("" if v is None else v for v in f1s)
            for v in f1s[1:]:
                row.append("" if v is None or f1s[0] is None else v - f1s[0])
            w.writerow(row)

    # counts table in tp/fp/dt/gt/rec/prec/AP shape at each method's first et
    with open(out_dir / "counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "et", "tp", "fp", "dt", "gt", "rec", "prec", "ap"])
        for p in payloads:
            s = p["per_threshold"][0]
            w.writerow([p["name"], s["et"], s["tp"], s["fp"], s["dt"], s["gt"],
                        s["rec"], s["prec"], "" if s["ap"] is None else s["ap"]])
    print(f"wrote comparison CSVs to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdnms", description=__doc__)
    parser.add_argument("--config", help="key=value file; command-line flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--objects", default="2:4", help="LO:HI objects per scene")
    p.add_argument("--occlusion", default="0.5:0.8", help="LO:HI target gt-pair IoU")
    p.add_argument("--proposals-per-object", type=int, default=4)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--stride", type=float, default=8.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample-pairs", help="sample labeled training pairs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-per-image", type=int, default=32)
    p.add_argument("--nt", type=float, default=0.5)
    p.add_argument("--match-thr", type=float, default=0.5)
    p.add_argument("--roi-size", type=int, default=14)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample_pairs)

    p = sub.add_parser("train", help="train the pairwise-relationship model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nt", type=float, default=0.5)
    p.add_argument("--match-thr", type=float, default=0.5)
    p.add_argument("--roi-size", type=int, default=14)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--model-width", type=int, default=32)
    p.add_argument("--emb-dim", type=int, default=50)
    p.add_argument("--head", choices=("gap", "fc"), default="gap")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distances", help="emit per-image pairwise distance matrices")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nt", type=float, default=0.5)
    p.add_argument("--model", help="checkpoint from `train`")
    p.add_argument("--oracle", action="store_true", help="use ground-truth oracle distances")
    p.add_argument("--match-thr", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("nms", help="run a suppression method over proposals")
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True,
                   choices=("greedy", "soft-linear", "soft-gaussian", "pairwise"))
    p.add_argument("--nt", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--distances", help="distance JSONL (pairwise only)")
    p.add_argument("--preset-et", type=float,
                   help="take nt/dt from the documented per-E_t presets")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("eval", help="COCO-style evaluation report")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="detections")
    p.add_argument("--et", default="0.5:0.95:0.05")
    p.add_argument("--buckets", default="0.4:0.9:0.05")
    p.add_argument("--f1-et", type=float, default=0.5)
    p.add_argument("--interpolation", choices=("coco101", "voc_all"), default="coco101")
    p.add_argument("--csv-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge eval reports into comparison CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    defaults = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SystemExit(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            value = value.strip()
            try:
                defaults[key] = json.loads(value)
            except json.JSONDecodeError:
                defaults[key] = value
    # subparsers keep their own default tables, so push the config values
    # into each of them as well as the root parser
    parser.set_defaults(**defaults)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "nms" and args.preset_et is not None:
        presets = suppress.load_presets()
        if round(args.preset_et, 2) not in presets:
            parser.error(f"no preset for E_t={args.preset_et}")
        nt, dt = presets[round(args.preset_et, 2)]
        if args.nt is None:
            args.nt = nt
        if args.dt is None:
            args.dt = dt
    try:
        return args.func(args)
    except (io.FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
