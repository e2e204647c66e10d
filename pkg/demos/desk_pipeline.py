"""Desk-scale run of the full stainer and refocuser pipeline.

Run with ``python demos/desk_pipeline.py [workdir]``.  Renders a phantom
dataset, trains the virtual stainer, trains the refocuser against it and
compares the chroma error of staining defocused input directly
(framework 1) with refocusing first (framework 2).  Takes about a quarter
of an hour on a laptop CPU.
"""

import logging
import sys
import tempfile

from vstain.config import desk_profile
from vstain.inference import evaluate_color_vs_defocus
from vstain.phantom import EVAL_Z, load_split, synthesize_dataset
from vstain.training import train_refocuser, train_virtual_stainer

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="vstain-")

manifest = synthesize_dataset(root, n_train=40, n_test=50, n_val=4, seed=0)
train = load_split(manifest, "train")
vs = train_virtual_stainer(train, desk_profile("virtual_stainer", data_dir=root))
dr = train_refocuser(train, vs.checkpoint, desk_profile("refocuser", data_dir=root))

ev = evaluate_color_vs_defocus(load_split(manifest, "test"), vs.generator, dr.generator, EVAL_Z,
                               out_dir=f"{root}/eval", image_metrics=False)
print(" z(um)  f1 dCb  f1 dCr  f2 dCb  f2 dCr   p(Cb)    p(Cr)")
for z in ev.z_list:
    f1, f2 = ev.mean_diff(1, z), ev.mean_diff(2, z)
    print(f"{z:+5.1f}  {f1[1]:6.2f}  {f1[2]:6.2f}  {f2[1]:6.2f}  {f2[2]:6.2f}  "
          f"{ev.ttest(z, 'Cb')['p']:.1e}  {ev.ttest(z, 'Cr')['p']:.1e}")
print(f"tables and plot in {root}/eval")
