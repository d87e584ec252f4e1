import numpy as np
import pytest

from argan import data


@pytest.fixture(scope="session")
def toy_dirs(tmp_path_factory):
    return tmp_path_factory.mktemp("toy")


@pytest.fixture(scope="session")
def toy_domains(toy_dirs):
    return data.make_toy_domains(seed=1, n_per_domain=4, side=32, out_dir=toy_dirs / "domains")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def write_manifest(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def small_image(tmp_path):
    from PIL import Image

    arr = (np.random.default_rng(3).random((32, 32, 3)) * 255).astype(np.uint8)
    path = tmp_path / "img.png"
    Image.fromarray(arr).save(path)
    return path
