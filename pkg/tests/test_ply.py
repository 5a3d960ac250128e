import numpy as np
import pytest

from vvstream.errors import PlyFormatError
from vvstream.geometry import CAMERA, PointCloud
from vvstream.ply import read_ply, write_ply


def sample_cloud():
    rng = np.random.default_rng(5)
    return PointCloud(rng.normal(size=(50, 3)), rng.integers(0, 256, size=(50, 3)))


class TestWritePly:
    @pytest.mark.parametrize('binary', [True, False])
    def test_read_back_at_float32(self, tmp_path, binary):
        cloud = sample_cloud()
        path = tmp_path / 'cloud.ply'
        write_ply(path, cloud, binary=binary)
        back = read_ply(path)
        np.testing.assert_array_equal(back.xyz, cloud.quantized().xyz)
        np.testing.assert_array_equal(back.rgb, cloud.rgb)

    def test_output_is_deterministic(self, tmp_path):
        cloud = sample_cloud()
        write_ply(tmp_path / 'a.ply', cloud)
        write_ply(tmp_path / 'b.ply', cloud)
        assert (tmp_path / 'a.ply').read_bytes() == (tmp_path / 'b.ply').read_bytes()

    def test_empty_cloud(self, tmp_path):
        write_ply(tmp_path / 'empty.ply', PointCloud.empty())
        assert len(read_ply(tmp_path / 'empty.ply')) == 0

    def test_frame_is_chosen_by_reader(self, tmp_path):
        write_ply(tmp_path / 'c.ply', sample_cloud())
        assert read_ply(tmp_path / 'c.ply', frame=CAMERA).frame == CAMERA


class TestReadPly:
    def write(self, tmp_path, text):
        path = tmp_path / 'in.ply'
        path.write_bytes(text if isinstance(text, bytes) else text.encode('ascii'))
        return path

    def test_ascii_without_colors(self, tmp_path):
        path = self.write(tmp_path, 'ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n'
                                    'property float x\nproperty float y\nproperty float z\nend_header\n'
                                    '0 0 0\n1 2 3\n')
        cloud = read_ply(path)
        np.testing.assert_array_equal(cloud.xyz, [[0, 0, 0], [1, 2, 3]])
        assert (cloud.rgb == 255).all()

    def test_not_a_ply(self, tmp_path):
        with pytest.raises(PlyFormatError, match='not a PLY'):
            read_ply(self.write(tmp_path, 'solid cube\n'))

    def test_missing_end_header(self, tmp_path):
        with pytest.raises(PlyFormatError):
            read_ply(self.write(tmp_path, 'ply\nformat ascii 1.0\nelement vertex 1\n'))

    def test_big_endian_unsupported(self, tmp_path):
        with pytest.raises(PlyFormatError, match='unsupported format'):
            read_ply(self.write(tmp_path, 'ply\nformat binary_big_endian 1.0\nelement vertex 0\n'
                                          'property float x\nproperty float y\nproperty float z\nend_header\n'))

    def test_truncated_binary(self, tmp_path):
        path = tmp_path / 'full.ply'
        write_ply(path, sample_cloud())
        data = path.read_bytes()
        with pytest.raises(PlyFormatError, match='truncated'):
            read_ply(self.write(tmp_path, data[:-7]))

    def test_short_ascii_row(self, tmp_path):
        path = self.write(tmp_path, 'ply\nformat ascii 1.0\nelement vertex 1\n'
                                    'property float x\nproperty float y\nproperty float z\nend_header\n1 2\n')
        with pytest.raises(PlyFormatError, match='vertex 0'):
            read_ply(path)
