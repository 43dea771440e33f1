"""panrecon command line: synth, reconstruct, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .dataset import DatasetError, LabelMap, load_sequence, prefetch
from .evaluation import LabeledVolume, evaluate_volumes, format_report
from .pipeline import Reconstructor, RunConfig
from .synthetic import SceneSpecError, generate_synthetic, read_scene
from .voxel_map import VoxelDump, read_dump, write_dump

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

MAP_FILE = "map.panvox"
INSTANCES_FILE = "instances.txt"
TIMING_FILE = "timing.txt"
ASSOCIATION_FILE = "associations.txt"
CONFIG_FILE = "run.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panrecon", description="Online panoptic 3D reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("reconstruct", help="fuse a sequence directory into a labeled voxel map")
    r.add_argument("seq_dir")
    r.add_argument("out_dir")
    r.add_argument("--voxel-size", type=_positive_float, default=0.05)
    r.add_argument("--truncation", type=_positive_float, default=None, help="default: 4 * voxel size")
    r.add_argument("--w-max", type=_positive_float, default=128.0)
    r.add_argument("--new-instance-likelihood", type=float, default=0.25)
    r.add_argument("--min-segment-pixels", type=int, default=50)
    r.add_argument("--depth-min", type=float, default=0.1)
    r.add_argument("--depth-max", type=float, default=8.0)
    r.add_argument("--edge-radius", type=int, default=1,
                   help="pixels around depth discontinuities that do not carve behind the surface")
    r.add_argument("--strict", action="store_true", help="abort on the first broken frame instead of skipping it")

    e = sub.add_parser("evaluate", help="panoptic quality of a predicted voxel dump against ground truth")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("labels")
    e.add_argument("--format", choices=("table", "tsv"), default="table")

    s = sub.add_parser("synth", help="render a synthetic sequence with ground truth")
    s.add_argument("spec")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=0)
    return p


def _config_from_args(args) -> RunConfig:
    return RunConfig(voxel_size=args.voxel_size, truncation=args.truncation, w_max=args.w_max,
                     new_instance_likelihood=args.new_instance_likelihood,
                     min_segment_pixels=args.min_segment_pixels, depth_min=args.depth_min,
                     depth_max=args.depth_max, edge_radius=args.edge_radius)


def association_lines(log) -> list[str]:
    """One line per segment: frame, local segment id, global id, and match|birth|stuff|dropped."""
    lines = []
    for entry in log:
        res = entry.result
        for seg in sorted(set(res.mapping) | res.dropped):
            if seg in res.dropped:
                lines.append(f"{entry.index} {seg} 0 dropped")
                continue
            gid = res.mapping[seg]
            kind = "stuff" if gid == 0 else "birth" if seg in res.births else "match"
            lines.append(f"{entry.index} {seg} {gid} {kind}")
    return lines


def cmd_reconstruct(args) -> int:
    config = _config_from_args(args)
    seq = load_sequence(args.seq_dir, strict=args.strict)
    out = Path(args.out_dir)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        recon = Reconstructor(seq.label_map, config)
        recon.run(prefetch(seq, capacity=2))
        if not recon.log:
            raise DatasetError(f"{args.seq_dir}: no frames")

        def emit(name, text):
            path = out / name
            written.append(path)
            path.write_text(text, encoding="utf-8", newline="\n")

        emit(CONFIG_FILE, config.to_text())
        written.append(out / MAP_FILE)
        dump = VoxelDump.from_grid(recon.grid)
        write_dump(out / MAP_FILE, dump)
        emit(INSTANCES_FILE, "".join(line + "\n" for line in recon.registry.summary_lines()))
        emit(TIMING_FILE, "# frame association_ms fusion_ms voxels_updated\n" + "".join(
            f"{e.index} {e.association_ms:.3f} {e.fusion_ms:.3f} {e.voxels_updated}\n" for e in recon.log))
        emit(ASSOCIATION_FILE, "".join(line + "\n" for line in association_lines(recon.log)))
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    n_ids = len(set(dump.instance_id[dump.instance_id != 0].tolist()))
    print(f"frames {len(recon.log)} skipped {len(seq.errors)} voxels {len(dump.coords)} instances {n_ids}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    labels = LabelMap.read(args.labels)
    pred_dump = read_dump(args.pred)
    gt_dump = read_dump(args.gt)
    pred = LabeledVolume.from_dump(pred_dump, labels)
    gt = LabeledVolume.from_dump(gt_dump, labels)
    report = evaluate_volumes(pred, gt)
    sys.stdout.write(format_report(report, labels, args.format))
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = read_scene(args.spec)
    out = Path(args.out_dir)
    created = not out.exists()
    try:
        summary = generate_synthetic(spec, out, seed=args.seed)
    except BaseException:
        if created:
            shutil.rmtree(out, ignore_errors=True)
        raise
    print(f"frames {summary.frames} objects {summary.objects} voxels {summary.voxels}")
    return EXIT_OK


COMMANDS = {"reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except AssertionError as exc:
        print(f"error: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (DatasetError, SceneSpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
