import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from diffattack.backbone import ToyBackbone, preprocess  # noqa: E402
from diffattack.style_source import procedural_texture  # noqa: E402
from diffattack.synthetic import smooth_random_image, synthetic_scene  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def toy():
    return ToyBackbone()


@pytest.fixture(scope="session")
def toy64():
    """Double-precision toy backbone for finite-difference checks."""
    return ToyBackbone(dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def stage1_fixture():
    """Smooth random 3x32x32 content and a procedural stripe style."""
    content = smooth_random_image(0)
    style = preprocess(procedural_texture("zebra stripe pattern", 0), (32, 32))
    return content, style


@pytest.fixture
def scene_files(tmp_path):
    img, mask = synthetic_scene(0, 32)
    from PIL import Image

    Image.fromarray(img).save(tmp_path / "content.png")
    Image.fromarray(mask).save(tmp_path / "mask.png")
    Image.fromarray(procedural_texture("tiger stripes", 3, 32)).save(tmp_path / "tex.png")
    return tmp_path
