import numpy as np
import pytest
from PIL import Image


def paint(path, seed, defect_box=None, size=96):
    """Small structured RGB image; optional bright square defect."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.stack(
        [
            120 + 60 * np.sin(xx / 9.0 + seed),
            110 + 50 * np.cos(yy / 7.0),
            90 + rng.normal(0, 8, size=(size, size)),
        ],
        axis=-1,
    )
    if defect_box:
        t, l, s = defect_box
        img[t : t + s, l : l + s] = 250.0
    Image.fromarray(np.clip(img, 0, 255).astype(np.uint8)).save(path)


def paint_mask(path, defect_box, size=96):
    mask = np.zeros((size, size), dtype=np.uint8)
    t, l, s = defect_box
    mask[t : t + s, l : l + s] = 255
    Image.fromarray(mask).save(path)


@pytest.fixture(scope="session")
def mini_mvtec(tmp_path_factory):
    """Ten-image miniature: 6 train good, 2 test good, 2 test defect+mask."""
    root = tmp_path_factory.mktemp("mini_mvtec")
    cls = root / "widget"
    (cls / "train" / "good").mkdir(parents=True)
    (cls / "test" / "good").mkdir(parents=True)
    (cls / "test" / "scratch").mkdir(parents=True)
    (cls / "ground_truth" / "scratch").mkdir(parents=True)
    for i in range(6):
        paint(cls / "train" / "good" / f"{i:03d}.png", seed=i)
    for i in range(2):
        paint(cls / "test" / "good" / f"{i:03d}.png", seed=10 + i)
    boxes = [(20, 24, 18), (50, 40, 22)]
    for i, box in enumerate(boxes):
        paint(cls / "test" / "scratch" / f"{i:03d}.png", seed=20 + i, defect_box=box)
        paint_mask(cls / "ground_truth" / "scratch" / f"{i:03d}_mask.png", box)
    return root
