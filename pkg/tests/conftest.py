import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from apmkit.raster_io import MultiBandImage, SiteTable

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_image(bands, names=None, mask=None, pixel_size_m=2.0):
    bands = np.asarray(bands, dtype=np.float32)
    if bands.ndim == 2:
        bands = bands[None]
    names = names or [f"b{i}" for i in range(bands.shape[0])]
    return MultiBandImage.from_arrays(bands, names, mask=mask, pixel_size_m=pixel_size_m)


def make_sites(xy, labels=None, prefix="s"):
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    labels = np.ones(len(xy), dtype=np.int64) if labels is None else labels
    return SiteTable(tuple(f"{prefix}{k}" for k in range(len(xy))), xy[:, 0], xy[:, 1], labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
