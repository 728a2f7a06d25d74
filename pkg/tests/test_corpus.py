import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stegolab.corpus import (SyntheticSpec, design_fields, generate_synthetic_corpus, load_corpus, load_image,
                             save_corpus, save_heatmap, save_image)


@pytest.mark.parametrize("kind", ["ellipse", "outside", "half"])
def test_mask_fraction_in_range(kind):
    _, var, low = design_fields(SyntheticSpec(mask_kind=kind, seed=1))
    assert 0.1 <= low.mean() <= 0.9
    assert set(np.unique(var)) == {0.0004, 0.01}
    np.testing.assert_array_equal(var[:, :, 0] == 0.0004, low)


def test_empirical_variance_matches_design():
    spec = SyntheticSpec(var_low=0.0004, var_high=0.0025, seed=3)
    c = generate_synthetic_corpus(spec, 4000)
    emp = c.images.var(axis=0, ddof=1)
    # clipping is negligible with the mean field kept inside [0.2, 0.8]
    lo, hi = emp[c.low_mask].mean(), emp[~c.low_mask].mean()
    assert lo == pytest.approx(0.0004, rel=0.05)
    assert hi == pytest.approx(0.0025, rel=0.05)
    np.testing.assert_allclose(c.images.mean(axis=0), c.mean_field, atol=0.01)


def test_deterministic_and_split():
    a = generate_synthetic_corpus(SyntheticSpec(seed=5), 40)
    b = generate_synthetic_corpus(SyntheticSpec(seed=5), 40)
    np.testing.assert_array_equal(a.images, b.images)
    assert len(a.heldout) == 10 and len(a.train) == 30
    assert not set(a.train_idx) & set(a.heldout_idx)
    c = generate_synthetic_corpus(SyntheticSpec(seed=6), 40)
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("bad", [dict(height=12), dict(channels=2), dict(var_low=0.02, var_high=0.01),
                                 dict(mask_kind="ring")])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticSpec(**bad), 8)


def test_png_round_trip_quantizes(tmp_path):
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png")
    assert back.shape == (8, 8, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_save_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        save_image(tmp_path / "a.png", np.full((8, 8, 1), 1.5))
    with pytest.raises(ValueError):
        save_heatmap(np.full((8, 8), -0.1), tmp_path / "h.png")


def test_corrupt_png(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ValueError):
        load_image(tmp_path / "bad.png")


def test_corpus_directory_round_trip(tmp_path):
    c = generate_synthetic_corpus(SyntheticSpec(seed=2, height=16, width=16), 12)
    save_corpus(c, tmp_path)
    back = load_corpus(tmp_path)
    np.testing.assert_array_equal(back.heldout_idx, c.heldout_idx)
    assert np.abs(back.images - c.images).max() <= 0.5 / 255 + 1e-12
    assert back.low_mask is not None and np.array_equal(back.low_mask, c.low_mask)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["ellipse", "outside", "half"]))
def test_images_in_unit_range(seed, kind):
    try:
        c = generate_synthetic_corpus(SyntheticSpec(seed=seed, height=16, width=16, mask_kind=kind), 4)
    except ValueError as exc:
        assert "degenerate" in str(exc)
        return
    assert c.images.min() >= 0 and c.images.max() <= 1
    assert 0.1 <= c.low_mask.mean() <= 0.9
