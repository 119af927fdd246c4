import os
import stat
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from copnet.closing import (
    BackendError,
    ClosingConfig,
    ExternalBackend,
    IdentityBackend,
    MorphologicalBackend,
    close_morphological,
    disk,
    iterate_closing,
    modified_fraction,
    parse_backend,
    run_backend,
)
from copnet.raster import DimensionMismatchError, Field2D

unit_fields = arrays(np.float64, st.tuples(st.integers(1, 14), st.integers(1, 14)), elements=st.floats(0, 1))


def brute_close(img, radius):
    """Max then min over the disk, with half-sample mirrored borders."""
    fp = disk(radius)
    r = fp.shape[0] // 2
    offs = [(dy - r, dx - r) for dy in range(fp.shape[0]) for dx in range(fp.shape[1]) if fp[dy, dx]]

    def mirror(k, n):
        period = 2 * n
        k %= period
        return k if k < n else period - 1 - k

    def filt(a, op):
        h, w = a.shape
        out = np.empty_like(a)
        for i in range(h):
            for j in range(w):
                out[i, j] = op(a[mirror(i + dy, h), mirror(j + dx, w)] for dy, dx in offs)
        return out

    return filt(filt(img, max), min)


def test_disk_footprint():
    d = disk(2)
    assert d.shape == (5, 5)
    assert d.sum() == 21  # all offsets with |p| <= 2.5
    assert disk(1).sum() == 9


def test_constant_field_unchanged():
    f = Field2D(np.full((9, 9), 0.4))
    assert np.array_equal(close_morphological(f, 2).values, f.values)


def test_gap_in_line_is_filled():
    img = np.zeros((11, 11))
    img[5, 1:10] = 1
    img[5, 5] = 0
    ref = brute_close(img, 2)
    assert ref[5, 5] == 1
    out = close_morphological(Field2D(img), 2).values
    assert np.array_equal(out, ref)


@settings(max_examples=40, deadline=None)
@given(unit_fields, st.integers(1, 3))
def test_closing_matches_bruteforce(values, radius):
    out = close_morphological(Field2D(values), radius).values
    np.testing.assert_array_equal(out, brute_close(values, radius))


@settings(max_examples=60, deadline=None)
@given(unit_fields, st.integers(1, 3))
def test_closing_extensive_and_idempotent(values, radius):
    once = close_morphological(Field2D(values), radius)
    assert np.all(once.values >= values)
    twice = close_morphological(once, radius)
    assert np.array_equal(twice.values, once.values)


def test_parse_backend():
    assert parse_backend("identity") == IdentityBackend()
    assert parse_backend("morphological:3") == MorphologicalBackend(3)
    assert parse_backend("morphological") == MorphologicalBackend(2)
    assert parse_backend("external:./m.sh --x", 5) == ExternalBackend("./m.sh --x", 5)
    for bad in ("bogus", "external:", "identity:3"):
        with pytest.raises(ValueError):
            parse_backend(bad)


def test_identity_backend():
    f = Field2D(np.random.default_rng(0).random((6, 6)))
    assert np.array_equal(run_backend(IdentityBackend(), f).values, f.values)


def _script(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(f"#!{sys.executable}\nimport sys\n{body}\n")
    p.chmod(p.stat().st_mode | stat.S_IXUSR)
    return str(p)


def test_external_copy_roundtrip(tmp_path):
    cmd = _script(tmp_path, "copy.py", "import shutil; shutil.copyfile(sys.argv[1], sys.argv[2])")
    vals = np.random.default_rng(1).random((7, 9)).astype(np.float32).astype(np.float64)
    f = Field2D(vals, 0.3)
    out = run_backend(ExternalBackend(cmd), f)
    assert out.values.tobytes() == f.values.tobytes()


def test_external_wrong_dims(tmp_path):
    body = (
        "import struct\n"
        "open(sys.argv[2], 'wb').write(struct.pack('<4sBIIf', b'COPF', 1, 2, 2, 1.0) + bytes(16))"
    )
    cmd = _script(tmp_path, "bad.py", body)
    with pytest.raises(DimensionMismatchError):
        run_backend(ExternalBackend(cmd), Field2D(np.zeros((3, 3))))


def test_external_nonzero_exit(tmp_path):
    cmd = _script(tmp_path, "fail.py", "sys.exit(3)")
    with pytest.raises(BackendError, match="status 3"):
        run_backend(ExternalBackend(cmd), Field2D(np.zeros((3, 3))))


def test_external_timeout(tmp_path):
    cmd = _script(tmp_path, "slow.py", "import time; time.sleep(5)")
    with pytest.raises(BackendError, match="timed out"):
        run_backend(ExternalBackend(cmd, timeout=0.5), Field2D(np.zeros((3, 3))))


def test_external_missing_command():
    with pytest.raises(BackendError):
        run_backend(ExternalBackend(os.path.join("/nonexistent", "model")), Field2D(np.zeros((3, 3))))


def test_external_output_is_clamped(tmp_path):
    body = (
        "import struct\n"
        "hdr = open(sys.argv[1], 'rb').read()[:17]\n"
        "open(sys.argv[2], 'wb').write(hdr + struct.pack('<4f', -1.0, 0.5, 2.0, 1.0))"
    )
    cmd = _script(tmp_path, "wild.py", body)
    out = run_backend(ExternalBackend(cmd), Field2D(np.zeros((2, 2))))
    assert out.values.ravel().tolist() == [0.0, 0.5, 1.0, 1.0]


def test_modified_fraction_examples():
    a = Field2D(np.random.default_rng(2).random((16, 16)))
    assert modified_fraction(a, a) == 0
    comp = Field2D(np.where(a.values >= 0.5, 0.0, 1.0))
    assert modified_fraction(a, comp) == 1
    with pytest.raises(DimensionMismatchError):
        modified_fraction(a, Field2D(np.zeros((4, 4))))


def test_modified_fraction_262_of_262144():
    prev = np.zeros((512, 512))
    nxt = prev.copy()
    nxt.ravel()[np.random.default_rng(3).choice(512 * 512, 262, replace=False)] = 0.9
    frac = modified_fraction(Field2D(prev), Field2D(nxt))
    assert frac == 262 / 262144
    assert frac < 0.001


def test_identity_converges_in_one_iteration():
    f = Field2D(np.random.default_rng(4).random((10, 10)))
    run = iterate_closing(f, ClosingConfig(backend=IdentityBackend()))
    assert run.iterations == 1 and run.history == [0.0] and run.converged


def test_morphological_on_closed_map_converges_at_once():
    f = close_morphological(Field2D(np.random.default_rng(5).random((20, 20))), 2)
    run = iterate_closing(f, ClosingConfig(backend=MorphologicalBackend(2)))
    assert run.iterations == 1 and run.converged



def test_iteration_cap(monkeypatch):
    import copnet.closing as closing

    flip = lambda backend, f: Field2D(1.0 - f.values, f.spacing, "probability")  # noqa: E731
    monkeypatch.setattr(closing, "run_backend", flip)
    f = Field2D(np.zeros((4, 4)))
    run = closing.iterate_closing(f, ClosingConfig(max_iters=7))
    assert run.iterations == 7 and not run.converged
    assert run.history == [1.0] * 7


def test_keep_maps_and_callback():
    f = Field2D(np.random.default_rng(6).random((12, 12)))
    seen = []
    run = iterate_closing(
        f, ClosingConfig(backend=MorphologicalBackend(1)), keep_maps=True, callback=lambda k, m, fr: seen.append((k, fr))
    )
    assert len(run.maps) == run.iterations + 1
    assert run.maps[0] is f
    assert [fr for _, fr in seen] == run.history


def test_sweep_runs_all_iterations():
    f = Field2D(np.random.default_rng(7).random((12, 12)))
    run = iterate_closing(f, ClosingConfig(backend=IdentityBackend(), sweep=True), keep_maps=True)
    assert run.iterations == 30 and len(run.maps) == 31 and run.converged


@settings(max_examples=40, deadline=None)
@given(unit_fields, st.sampled_from([IdentityBackend(), MorphologicalBackend(1), MorphologicalBackend(2)]))
def test_idempotent_backends_stop_within_two(values, backend):
    run = iterate_closing(Field2D(values), ClosingConfig(backend=backend))
    assert run.iterations <= 2
    assert run.converged == (run.history[-1] < 0.001)
    assert all(0 <= h <= 1 for h in run.history)


def test_config_validation():
    with pytest.raises(ValueError):
        ClosingConfig(convergence=0)
    with pytest.raises(ValueError):
        ClosingConfig(max_iters=0)
    with pytest.raises(ValueError):
        ClosingConfig(threshold=1.0)
