import numpy as np
import pytest

from vtgslam.core import DataError, GaussianSet, InvalidStateError, Section, SectionState
from vtgslam.storage import LEARNABLE_PER_RECORD, RECORD, decode_section, encode_section, read_section, write_section


def frozen_section(n=50, seed=0, overlap=3):
    rng = np.random.default_rng(seed)
    gs = GaussianSet(
        rng.uniform(size=(n, 3)).astype(np.float32).astype(np.float64),
        rng.uniform(0.001, 0.01, n).astype(np.float32).astype(np.float64),
        rng.uniform(size=n).astype(np.float32).astype(np.float64),
        rng.integers(40, 80, n),
        rng.integers(0, 640, (n, 2)),
        rng.uniform(0.5, 5, n).astype(np.float32).astype(np.float64),
        rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64),
    )
    gs.set_readonly()
    return Section(1, list(range(40, 80)), gs, SectionState.FROZEN, overlap)


class TestFormat:
    def test_five_learnable_scalars_per_record(self):
        assert LEARNABLE_PER_RECORD == 5
        assert RECORD.itemsize == 44

    def test_isotropic_storage_arithmetic(self):
        # full anisotropic Gaussian: 3 position + 4 rotation + 3 scale + 3 color + 1 opacity
        full = 3 + 4 + 3 + 3 + 1
        assert full == 14
        assert 1 - LEARNABLE_PER_RECORD / full == pytest.approx(9 / 14)
        assert round(100 * 9 / 14, 1) == 64.3

    def test_size(self):
        s = frozen_section(n=7)
        header = 4 + 4 + 4 + 8 + 4 + 4 * 40 + 4
        assert len(encode_section(s)) == header + 7 * 44 + 4


class TestRoundTrip:
    @pytest.mark.parametrize("overlap", [None, 3])
    def test_exact(self, tmp_path, overlap):
        s = frozen_section(overlap=overlap)
        t = read_section(write_section(s, tmp_path / "s.vtgs"))
        assert (t.id, t.frame_indices, t.overlap_id, t.frozen) == (1, s.frame_indices, overlap, True)
        assert t.gaussians.checksum() == s.gaussians.checksum()

    def test_empty(self):
        s = Section(0, [0], GaussianSet.empty(), SectionState.FROZEN)
        s.gaussians = GaussianSet(np.zeros((0, 3)), [], [], [], np.zeros((0, 2)), [], np.zeros((0, 3)))
        assert len(decode_section(encode_section(s)).gaussians) == 0

    def test_reloaded_readonly(self):
        t = decode_section(encode_section(frozen_section()))
        with pytest.raises(ValueError):
            t.gaussians.radius[0] = 1.0


class TestCorruption:
    def test_bad_magic(self):
        data = bytearray(encode_section(frozen_section()))
        data[0:4] = b"XXXX"
        with pytest.raises(DataError):
            decode_section(bytes(data))

    def test_bad_crc(self):
        data = bytearray(encode_section(frozen_section()))
        data[100] ^= 0xFF
        with pytest.raises(DataError):
            decode_section(bytes(data))

    def test_truncated(self):
        with pytest.raises(DataError):
            decode_section(encode_section(frozen_section())[:10])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_section(tmp_path / "nope.vtgs")

    def test_active_section_rejected(self):
        with pytest.raises(InvalidStateError):
            encode_section(Section(0, [0], GaussianSet.empty()))
