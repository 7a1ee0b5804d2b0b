"""The whole pipeline through the command line, at toy scale.

synth writes a workspace of images, masks, normals and flows; train runs the
static, coarse and refine stages (regenerating the sequence before refine);
eval scores the final field on the training views and the held-out view.
Budgets here are tiny so the script finishes in a few minutes; the numbers
are illustrative, not converged.

    python demos/03_pipeline_cli.py [workdir]
"""

import pathlib
import sys
import tempfile

from gf4d.cli import main

work = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="gf4d-demo-"))
work.mkdir(parents=True, exist_ok=True)
(work / "scene.cfg").write_text(
    "kind = translation\nnum_frames = 4\nnum_gaussians = 600\nimage_size = 48, 48\nvelocity = 0.04, 0, 0\n")
(work / "train.cfg").write_text(
    "[train]\nstatic_iters = 150\ncoarse_iters = 120\nrefine_iters = 60\ndensify_from = 30\n"
    "densify_until = 120\ndensify_interval = 30\nnum_controls = 64\nmax_gaussians = 1500\n"
    "carve_resolution = 32\n[regenerate]\ninterval = 3\n")
ws = work / "ws"

steps = [
    ["synth", str(work / "scene.cfg"), str(ws), "--force"],
    ["train", str(ws), "--config", str(work / "train.cfg"), "--restart"],
    ["render", str(ws / "checkpoints" / "refine.gf4d"), "--view", "7", "--time", "all", "--channels", "rgb",
     "--workspace", str(ws), "--out", str(work / "renders")],
    ["eval", str(ws), str(ws / "checkpoints" / "refine.gf4d")],
]
for argv in steps:
    print("$ gf4d", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)
print("workspace:", ws)
print("held-out renders:", work / "renders")
