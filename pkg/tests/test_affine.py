import numpy as np
import pytest

from absentreg.affine import IDENTITY, AffineConfig, affine_ngf, register_affine
from absentreg.errors import InputError
from absentreg.synth import make_phantom
from absentreg.volume import Volume, affine_to_field, identity_grid, warp_array

from fdcheck import max_relative_error

FAST = AffineConfig(max_dim=(32, 32, 32), min_dim=(16, 16, 16), max_iter_per_level=(40, 30, 20))


@pytest.fixture(scope="module")
def phantom():
    return make_phantom((32, 32, 32), 40, 11)


def test_defaults_match_table():
    cfg = AffineConfig()
    assert (cfg.n_levels, cfg.max_dim, cfg.min_dim) == (3, (64, 64, 40), (16, 16, 16))
    assert cfg.lr_per_level == (1e-2, 5e-3, 2e-3) and cfg.max_iter_per_level == (90, 90, 90)
    assert cfg.ngf_epsilon == 0.01 and cfg.channels == (0,)
    with pytest.raises(ValueError):
        AffineConfig(n_levels=2)


def test_affine_ngf_gradient():
    rng = np.random.default_rng(0)
    img = make_phantom((16, 16, 16), 20, 2).data
    moving = make_phantom((16, 16, 16), 20, 3).data
    A = IDENTITY + rng.normal(size=(3, 4)) * 0.03
    _, dA = affine_ngf(img, moving, A, 0.01)
    f = lambda x: affine_ngf(img, moving, x, 0.01, grad=False)[0]
    # trilinear sampling is piecewise smooth; a tiny step avoids crossing voxel cells
    assert max_relative_error(f, A, dA, n_probe=12, step=1e-7) < 1e-3


def test_identical_images_stay_near_identity(phantom):
    res = register_affine(phantom, phantom, FAST)
    assert np.abs(res.A_bf - IDENTITY).max() < 1e-2
    assert np.abs(res.A_fb - IDENTITY).max() < 1e-2


def test_recovers_translation(phantom):
    dims = phantom.dims
    half = (np.array(dims) - 1) / 2
    A = IDENTITY.copy()
    A[:, 3] = np.array([3.0, -2.0, 1.5]) / half
    F = Volume(warp_array(phantom.data, affine_to_field(A, dims)))
    res = register_affine(phantom, F, FAST)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    err = (corners @ (res.A_bf[:, :3] - A[:, :3]).T + res.A_bf[:, 3] - A[:, 3]) * half
    assert np.mean(np.linalg.norm(err, axis=1)) < 0.5


def test_report_best_iterate_rule(phantom):
    F = Volume(warp_array(phantom.data, affine_to_field(IDENTITY + 0.03 * np.eye(3, 4), phantom.dims)))
    res = register_affine(phantom, F, FAST)
    for d in ("bf", "fb"):
        rep = res.report[d]
        for trace, best in zip(rep["traces"], rep["best_index_per_level"]):
            assert best == int(np.argmin(trace))
        scores = rep["candidate_scores_finest"]
        assert rep["final_ngf"] == min(scores) <= scores[0] == rep["initial_ngf"]


def test_degenerate_and_invalid_inputs(phantom):
    flat = Volume(np.full((32, 32, 32), 0.5))
    res = register_affine(flat, phantom, FAST)
    assert res.report["degenerate"] and np.array_equal(res.A_bf, IDENTITY)
    two = Volume(np.stack([phantom.data[0]] * 2))
    with pytest.raises(InputError):
        register_affine(two, two, AffineConfig(channels=None))
    with pytest.raises(InputError):
        register_affine(phantom, make_phantom((32, 32, 24), 5, 0), FAST)
