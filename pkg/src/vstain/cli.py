"""``vstain`` command line: data synthesis, two-stage training, inference,
evaluation, scan-time planning and registration."""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import scan
from .checkpoint import Checkpoint
from .config import desk_profile, dump_config, load_config
from .inference import evaluate_color_vs_defocus, infer
from .phantom import EVAL_Z, load_split, read_manifest, synthesize_dataset
from .registration import register_pipeline
from .training import train_refocuser, train_virtual_stainer

log = logging.getLogger("vstain")


def _config(args, stage):
    if args.config:
        return load_config(args.config, stage)
    return desk_profile(stage)


def _cmd_synth(args):
    cfg = _config(args, "virtual_stainer")
    m = synthesize_dataset(cfg.data_dir, cfg.n_train, cfg.n_test, cfg.n_val, size=cfg.fov_size,
                           patch_size=cfg.patch_size, nuclei_density=cfg.nuclei_density,
                           seed=cfg.seed, augment=cfg.augment)
    print(f"wrote {len(m)} fields of view to {cfg.data_dir}")


def _train_records(cfg):
    return load_split(read_manifest(cfg.data_dir, cfg.augment), "train")


def _cmd_train_vs(args):
    cfg = _config(args, "virtual_stainer")
    res = train_virtual_stainer(_train_records(cfg), cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = res.checkpoint.save(args.out or os.path.join(cfg.out_dir, "vs.ckpt"))
    print(f"stainer checkpoint: {path}")


def _cmd_train_dr(args):
    cfg = _config(args, "refocuser")
    vs_path = args.vs_ckpt or os.path.join(cfg.out_dir, "vs.ckpt")
    res = train_refocuser(_train_records(cfg), Checkpoint.load(vs_path), cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = res.checkpoint.save(args.out or os.path.join(cfg.out_dir, "dr.ckpt"))
    print(f"refocuser checkpoint: {path}")


def _read_af_pairs(directory):
    """``(name, (2, H, W))`` for every ``*_dapi.png`` with a matching ``*_txred.png``."""
    pairs = []
    for dapi in sorted(glob.glob(os.path.join(directory, "*_dapi.png"))):
        txred = dapi[: -len("_dapi.png")] + "_txred.png"
        if not os.path.exists(txred):
            raise FileNotFoundError(f"no TxRed channel for {dapi}")
        planes = []
        for p in (dapi, txred):
            img = np.asarray(Image.open(p), dtype=np.float64)
            planes.append(img / (65535.0 if img.max() > 255 else 255.0))
        pairs.append((os.path.basename(dapi)[: -len("_dapi.png")], np.stack(planes)))
    if not pairs:
        raise FileNotFoundError(f"no *_dapi.png images in {directory}")
    return pairs


def _cmd_infer(args):
    stainer = Checkpoint.load(args.vs_ckpt).network("generator")
    refocuser = Checkpoint.load(args.dr_ckpt).network("generator") if args.dr_ckpt else None
    if args.framework == 2 and refocuser is None:
        raise SystemExit("framework 2 needs --dr-ckpt")
    os.makedirs(args.out, exist_ok=True)
    for name, af in _read_af_pairs(args.input):
        rgb = infer(af, args.framework, stainer, refocuser)
        Image.fromarray(rgb, mode="RGB").save(os.path.join(args.out, f"{name}_f{args.framework}.png"))
    print(f"wrote framework-{args.framework} images to {args.out}")


def _cmd_eval(args):
    cfg = _config(args, "refocuser")
    vs = Checkpoint.load(args.vs_ckpt or os.path.join(cfg.out_dir, "vs.ckpt")).network("generator")
    dr = Checkpoint.load(args.dr_ckpt or os.path.join(cfg.out_dir, "dr.ckpt")).network("generator")
    records = load_split(read_manifest(cfg.data_dir), "test")
    out = args.out or os.path.join(cfg.out_dir, "eval")
    res = evaluate_color_vs_defocus(records, vs, dr, EVAL_Z, out_dir=out)
    print("z_um  f1(dY dCb dCr)        f2(dY dCb dCr)        p_Cb      p_Cr")
    for z in res.z_list:
        f1, f2 = res.mean_diff(1, z), res.mean_diff(2, z)
        print(f"{z:+.1f}  {f1[0]:6.2f} {f1[1]:6.2f} {f1[2]:6.2f}  {f2[0]:6.2f} {f2[1]:6.2f} {f2[2]:6.2f}"
              f"  {res.ttest(z, 'Cb')['p']:.2e}  {res.ttest(z, 'Cr')['p']:.2e}")
    print(f"tables and plot in {out}")


def _cmd_scanplan(args):
    kw = {"integer_points": args.integer_points}
    if args.capture is not None:
        kw["capture_time_per_fov"] = args.capture
    reports = {m: scan.plan_scan(scan.ScanPlan.for_mode(m, args.fovs, **kw)) for m in ("fine", "coarse")}
    shown = reports if args.mode == "both" else {args.mode: reports[args.mode]}
    text = scan.scan_csv(shown)
    sv = scan.compare_plans(reports["fine"], reports["coarse"])
    summary = f"# savings coarse vs fine: autofocus {sv['autofocus_pct']:.1f}%, total {sv['total_pct']:.1f}%"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    print(summary)


def _read_gray(path):
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / arr.max() if arr.max() > 0 else arr


def _cmd_register(args):
    moving, fixed = _read_gray(args.moving), _read_gray(args.fixed)
    res = register_pipeline(moving, fixed, pyramid_levels=args.levels, block_size=args.block)
    a = res["affine"]
    print(f"coarse offset: {res['offset']}")
    print(f"affine: angle {a.angle_deg():.3f} deg, scale {a.scale():.4f}, "
          f"shift ({a.translation[0]:.2f}, {a.translation[1]:.2f})")
    print(f"elastic: max |d| {np.abs(res['field'].field).max():.2f} px, "
          f"textureless blocks {res['field'].flagged_blocks}")
    if args.out:
        res["field"].save(args.out)
        print(f"displacement field: {args.out}")
    if args.warped:
        img = np.clip(res["registered"] * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(img).save(args.warped)


def build_parser():
    p = argparse.ArgumentParser(prog="vstain", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic phantom dataset")
    s.add_argument("--config")
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("train-vs", help="train the virtual stainer")
    s.add_argument("--config")
    s.add_argument("--out", help="checkpoint path (default OUT_DIR/vs.ckpt)")
    s.set_defaults(fn=_cmd_train_vs)

    s = sub.add_parser("train-dr", help="train the refocuser against a frozen stainer")
    s.add_argument("--config")
    s.add_argument("--vs-ckpt")
    s.add_argument("--out", help="checkpoint path (default OUT_DIR/dr.ckpt)")
    s.set_defaults(fn=_cmd_train_dr)

    s = sub.add_parser("infer", help="stain *_dapi.png/*_txred.png pairs")
    s.add_argument("--framework", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vs-ckpt", required=True)
    s.add_argument("--dr-ckpt")
    s.set_defaults(fn=_cmd_infer)

    s = sub.add_parser("eval", help="colour difference and t-tests versus defocus")
    s.add_argument("--config")
    s.add_argument("--vs-ckpt")
    s.add_argument("--dr-ckpt")
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("scanplan", help="whole-slide acquisition time model")
    s.add_argument("--mode", choices=("fine", "coarse", "both"), default="both")
    s.add_argument("--fovs", type=int, default=208)
    s.add_argument("--capture", type=float, help="seconds per field of view")
    s.add_argument("--integer-points", action="store_true", help="round the focus-point count")
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_scanplan)

    s = sub.add_parser("register", help="coarse, affine and elastic registration of two images")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--block", type=int, default=16)
    s.add_argument("--out", help="write the displacement field here")
    s.add_argument("--warped", help="write the registered moving image here")
    s.set_defaults(fn=_cmd_register)

    s = sub.add_parser("config", help="print the default desk configuration")
    s.add_argument("--stage", choices=("virtual_stainer", "refocuser"), default="virtual_stainer")
    s.set_defaults(fn=lambda a: sys.stdout.write(dump_config(desk_profile(a.stage))))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
