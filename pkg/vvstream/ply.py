"""PLY reader/writer for point clouds (binary little-endian and ASCII).

Only the vertex element is read; x, y, z are required and red, green, blue
default to white when absent. Written files always carry float32 x/y/z and
uchar red/green/blue.
"""
import os

import numpy as np

from vvstream.errors import PlyFormatError
from vvstream.geometry import WORLD, PointCloud

PLY_TYPES = {
    'char': 'i1', 'int8': 'i1',
    'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2',
    'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4',
    'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4',
    'double': 'f8', 'float64': 'f8',
}

_VERTEX_DTYPE = np.dtype([('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
                          ('red', 'u1'), ('green', 'u1'), ('blue', 'u1')])


class PlyHeader:
    def __init__(self):
        self.format = None
        self.vertex_count = 0
        self.properties = []
        self.vertex_first = True
        self.length = 0


def _parse_header(fid, path):
    header = PlyHeader()
    magic = fid.readline()
    if magic.strip() != b'ply':
        raise PlyFormatError(f'{path}: not a PLY file')
    seen_elements = []
    while True:
        raw = fid.readline()
        if not raw:
            raise PlyFormatError(f'{path}: header has no end_header line')
        try:
            line = raw.decode('ascii').strip()
        except UnicodeDecodeError:
            raise PlyFormatError(f'{path}: PLY header is not ASCII')
        if not line or line.startswith(('comment', 'obj_info')):
            continue
        parts = line.split()
        if parts[0] == 'format':
            if len(parts) != 3 or parts[1] not in ('ascii', 'binary_little_endian'):
                raise PlyFormatError(f'{path}: unsupported format {line!r}')
            header.format = parts[1]
        elif parts[0] == 'element':
            if len(parts) != 3:
                raise PlyFormatError(f'{path}: malformed element line {line!r}')
            seen_elements.append(parts[1])
            if parts[1] == 'vertex':
                try:
                    header.vertex_count = int(parts[2])
                except ValueError:
                    raise PlyFormatError(f'{path}: bad vertex count {parts[2]!r}')
                if header.vertex_count < 0:
                    raise PlyFormatError(f'{path}: negative vertex count')
                header.vertex_first = len(seen_elements) == 1
        elif parts[0] == 'property':
            if seen_elements and seen_elements[-1] == 'vertex':
                if len(parts) != 3 or parts[1] not in PLY_TYPES:
                    raise PlyFormatError(f'{path}: unsupported vertex property {line!r}')
                header.properties.append((parts[2], PLY_TYPES[parts[1]]))
        elif parts[0] == 'end_header':
            break
        else:
            raise PlyFormatError(f'{path}: unexpected header line {line!r}')
    if header.format is None:
        raise PlyFormatError(f'{path}: missing format line')
    if 'vertex' not in seen_elements:
        raise PlyFormatError(f'{path}: no vertex element')
    if not header.vertex_first:
        raise PlyFormatError(f'{path}: vertex must be the first element')
    names = [name for name, _ in header.properties]
    for axis in ('x', 'y', 'z'):
        if axis not in names:
            raise PlyFormatError(f'{path}: vertex property {axis!r} missing')
    return header


def read_ply(path, frame=WORLD) -> PointCloud:
    with open(path, 'rb') as fid:
        header = _parse_header(fid, path)
        dtype = np.dtype([(name, '<' + code) for name, code in header.properties])
        if header.format == 'binary_little_endian':
            expected = dtype.itemsize * header.vertex_count
            data = fid.read(expected)
            if len(data) < expected:
                raise PlyFormatError(
                    f'{path}: truncated vertex data ({len(data)} of {expected} bytes)')
            table = np.frombuffer(data, dtype=dtype, count=header.vertex_count)
        else:
            table = np.empty(header.vertex_count, dtype=dtype)
            for row in range(header.vertex_count):
                raw = fid.readline()
                values = raw.split()
                if len(values) < len(header.properties):
                    raise PlyFormatError(f'{path}: vertex {row} has {len(values)} values')
                try:
                    table[row] = tuple(float(v) for v in values[:len(header.properties)])
                except ValueError:
                    raise PlyFormatError(f'{path}: vertex {row} is not numeric')

    xyz = np.column_stack([table['x'], table['y'], table['z']]).astype(np.float64)
    if not np.isfinite(xyz).all():
        raise PlyFormatError(f'{path}: non-finite coordinates')
    names = table.dtype.names
    if all(c in names for c in ('red', 'green', 'blue')):
        rgb = np.column_stack([table['red'], table['green'], table['blue']])
        rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    else:
        rgb = np.full((len(xyz), 3), 255, dtype=np.uint8)
    return PointCloud(xyz, rgb, frame)


def write_ply(path, cloud: PointCloud, binary=True):
    """Write a cloud; output bytes depend only on the cloud contents."""
    table = np.empty(len(cloud), dtype=_VERTEX_DTYPE)
    xyz = cloud.xyz.astype(np.float32)
    table['x'], table['y'], table['z'] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    table['red'], table['green'], table['blue'] = cloud.rgb[:, 0], cloud.rgb[:, 1], cloud.rgb[:, 2]

    fmt = 'binary_little_endian' if binary else 'ascii'
    header = (
        'ply\n'
        f'format {fmt} 1.0\n'
        f'element vertex {len(cloud)}\n'
        'property float x\nproperty float y\nproperty float z\n'
        'property uchar red\nproperty uchar green\nproperty uchar blue\n'
        'end_header\n'
    )
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as fid:
        fid.write(header.encode('ascii'))
        if binary:
            fid.write(table.tobytes())
        else:
            for (x, y, z), (r, g, b) in zip(xyz.tolist(), cloud.rgb.tolist()):
                fid.write(f'{x!r} {y!r} {z!r} {r} {g} {b}\n'.encode('ascii'))
