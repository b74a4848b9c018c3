"""End to end on synthetic fundus images: write a dataset, train, evaluate, look at an overlay.

Run from any scratch directory; everything lands under ./demo_run.
"""

from pathlib import Path

from lmbisnet import cli
from lmbisnet.data import write_synthetic_dataset

root = Path("demo_run")
write_synthetic_dataset(root / "data", n_train=4, n_test=2, size=48, seed=1)

(root / "tiny.cfg").write_text(
    "stage_widths = 2,4,8\n"
    "multipath_width = 4\n"
    "learning_rate = 0.01\n"
    "max_epochs = 3\n"
    "image_size = 48\n"
    f"manifest = {root / 'data'}\n"
    f"out = {root / 'out'}\n"
)

assert cli.main(["train", "--config", str(root / "tiny.cfg")]) == 0
print((root / "out" / "history.txt").read_text())

assert cli.main(["evaluate", "--config", str(root / "tiny.cfg")]) == 0
print((root / "out" / "metrics.txt").read_text())

# green = hit, red = false alarm, blue = miss, gray = outside the field of view
print("overlays in", root / "out" / "overlays")
