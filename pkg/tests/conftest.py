import os

import numpy as np
import pytest

from bicyclesr import classical, dataio


def _smooth_image(rng, size):
    """Band-limited random RGB image in [0,1]: low-res noise upscaled."""
    seedimg = rng.uniform(0.0, 1.0, size=(max(size // 8, 2), max(size // 8, 2), 3))
    img = classical.resize_to(seedimg.astype(np.float32), size, size)
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_png_corpus(root, n, size, seed):
    """Write n synthetic PNGs under root; returns the directory path."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img = _smooth_image(rng, size)
        dataio.save_image(os.path.join(root, f"img{i:02d}.png"), dataio.ImageBuffer.from_float(img))
    return str(root)


@pytest.fixture(scope="session")
def hr_dir(tmp_path_factory):
    """Six 96px synthetic HR training images."""
    return write_png_corpus(tmp_path_factory.mktemp("hr"), 6, 96, seed=11)


@pytest.fixture(scope="session")
def lr_dir(tmp_path_factory):
    """Six 24px real-LR-stand-in images: blurred, noisy 4x downscales of a
    different synthetic set (unpaired with hr_dir)."""
    root = tmp_path_factory.mktemp("lr")
    rng = np.random.default_rng(77)
    cfg = classical.SyntheticDegradationConfig(scale=4, noise_percent=2.0)
    for i in range(6):
        hr = _smooth_image(rng, 96)
        lr = classical.synth_degrade(hr, cfg, rng)
        dataio.save_image(os.path.join(root, f"img{i:02d}.png"), dataio.ImageBuffer.from_float(lr))
    return str(root)


def set5_dir():
    """Directory holding the five Set5 PNGs, or None if not provided."""
    candidates = [
        os.environ.get("SET5_DIR", ""),
        os.path.join(os.path.dirname(__file__), "..", "data", "Set5"),
    ]
    for c in candidates:
        if c and os.path.isdir(c):
            pngs = [f for f in os.listdir(c) if f.lower().endswith(".png")]
            if len(pngs) >= 5:
                return c
    return None


needs_set5 = pytest.mark.skipif(
    set5_dir() is None,
    reason="Set5 images not available (place PNGs in data/Set5 or set SET5_DIR)",
)


def tiny_train_config(hr, lr, **overrides):
    """Smallest structurally complete training config (seconds per run)."""
    from bicyclesr.trainer import desk_profile

    base = dict(
        hr_patch=16,
        batch_size=2,
        g_width=8,
        g_blocks=1,
        r_width=8,
        r_blocks=1,
        p_width_scale=0.03125,
        p_input_size=16,
        iterations=5,
        checkpoint_every=5,
        hr_dir=hr,
        lr_dir=lr,
        seed=3,
    )
    base.update(overrides)
    return desk_profile(**base)
