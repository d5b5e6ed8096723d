"""
Module
------
datapipe.py: Offline preprocessing and binarisation of volumes

Summary
-------
Synthetic multi-modal volumes stand in for the MRI data. Each volume is standardised per modality, cropped
in depth, transposed to channels-first and its 4-class labels collapsed to a binary mask. Samples are then
packed into a checksummed binary record file with a manifest of offsets and the train/val/test split.

Notes
-----
Record file layout, all little-endian::

    b'DMIS' | version <H
    per record:
        record length <I (bytes after this field, crc included)
        id length <H | id utf-8
        dtype code <B | image channels <B | dims <4I (C, H, W, D)
        payload: image then mask in the dtype named by the code, C*H*W*D values
        crc32 of payload <I

C is the image channels plus the one mask channel. Dtype codes: 1 float32, 2 float64. The crc covers the
payload only; a damaged id or dims field is reported as a corrupt record as well.
"""
import logging
import multiprocessing
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import yaml
from scipy import ndimage

from MISPar import config
from MISPar.exceptions import (InvalidDims, CropError, LayoutError, LabelError, SplitError, IoError,
                               CorruptRecord, InvalidCount)

logger = logging.getLogger(__name__)

MODALITIES = 4
MIN_DIM = 8
CROP_MODES = ('leading', 'center')

_header = struct.Struct('<4sH')
_length = struct.Struct('<I')
_idLength = struct.Struct('<H')
_dims = struct.Struct('<BB4I')
_crc = struct.Struct('<I')

DTYPE_CODES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}
FLOAT32, FLOAT64 = 1, 2


@dataclass(frozen=True, eq=False)
class RawVolume:
    """Channels-last modalities (H, W, D, 4) and integer labels (H, W, D)"""
    id: str
    channels: np.ndarray
    labels: np.ndarray

    @property
    def dims(self):
        return tuple(self.labels.shape)


@dataclass(frozen=True, eq=False)
class ProcessedSample:
    """Channels-first image (4, H, W, D) float32 or float64 and binary mask (1, H, W, D) uint8"""
    id: str
    image: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class RecordEntry:
    id: str
    offset: int
    length: int


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    ratios: tuple = config.deployment.ratios
    seed: int = 0
    data_file: str = ''

    def ids(self, split=None):
        return [e.id for e in self.entries if split is None or self.splits.get(e.id) == split]

    def to_dict(self):
        return {'data_file': self.data_file, 'seed': self.seed, 'ratios': list(self.ratios),
                'records': [{'id': e.id, 'offset': e.offset, 'length': e.length,
                             'split': self.splits.get(e.id)} for e in self.entries]}

    @classmethod
    def from_dict(cls, data):
        records = data.get('records') or []
        return cls(entries=[RecordEntry(r['id'], int(r['offset']), int(r['length'])) for r in records],
                   splits={r['id']: r['split'] for r in records},
                   ratios=tuple(data.get('ratios', config.deployment.ratios)),
                   seed=int(data.get('seed', 0)), data_file=data.get('data_file', ''))


def synth_volume(seed, dims=(16, 16, 16), tumor_blob_count=1, smoothing=2.0):
    """Generate a deterministic synthetic volume

    Modalities are smoothed gaussian noise fields with a per-modality offset; labels hold
    ``tumor_blob_count`` ellipsoids labelled 1 to 3 on a background of 0.

    :param seed: random seed
    :type seed: int
    :param dims: spatial dims (H, W, D), each >= 8
    :type dims: tuple
    :param tumor_blob_count: number of labelled ellipsoids
    :type tumor_blob_count: int
    :rtype: RawVolume
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < MIN_DIM:
        raise InvalidDims('synth_volume', f'dims must be three values >= {MIN_DIM}, got {dims}')
    if tumor_blob_count < 0:
        raise InvalidCount('synth_volume', f'blob count must be >= 0, got {tumor_blob_count}')

    rng = np.random.default_rng(seed)
    channels = np.empty(dims + (MODALITIES,), dtype=np.float32)
    for c in range(MODALITIES):
        noise = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=smoothing, mode='reflect')
        channels[..., c] = (100.0 * (c + 1) + 25.0 * noise).astype(np.float32)

    labels = np.zeros(dims, dtype=np.uint8)
    grid = np.ogrid[tuple(slice(0, d) for d in dims)]
    for _ in range(tumor_blob_count):
        centre = [rng.uniform(0.25 * d, 0.75 * d) for d in dims]
        radii = [rng.uniform(1.5, max(2.0, d / 4)) for d in dims]
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0
        labels[inside] = rng.integers(1, 4)
        # brighten the lesion in every modality
        channels[inside] += np.float32(40.0)

    return RawVolume(id=f'synth-{seed:05d}', channels=channels, labels=labels)


def standardize(volume):
    """Zero mean, unit variance per modality; constant modalities become all zeros"""
    data = volume.channels.astype(np.float64)
    out = np.zeros_like(data)
    for c in range(data.shape[-1]):
        channel = data[..., c]
        mean = channel.mean()
        std = channel.std()
        if std > 0:
            out[..., c] = (channel - mean) / std
    return RawVolume(id=volume.id, channels=out, labels=volume.labels)


def crop_depth(volume, target_depth=config.deployment.crop_depth, mode='leading'):
    """Crop every modality and the labels to ``target_depth`` slices

    :param mode: 'leading' keeps slices [0, target_depth); 'center' keeps the middle block
    :type mode: str
    :rtype: RawVolume
    """
    depth = volume.labels.shape[-1]
    if mode not in CROP_MODES:
        raise CropError('crop_depth', f'unknown crop mode {mode!r}')
    if target_depth < 1 or target_depth > depth:
        raise CropError('crop_depth', f'cannot crop depth {depth} to {target_depth}')
    start = 0 if mode == 'leading' else (depth - target_depth) // 2
    keep = slice(start, start + target_depth)
    return RawVolume(id=volume.id, channels=volume.channels[:, :, keep, :], labels=volume.labels[:, :, keep])


def to_channels_first(volume):
    """(H, W, D, 4) -> (4, H, W, D); element (c, h, w, d) is modality c at (h, w, d)"""
    channels = np.asarray(volume.channels if isinstance(volume, RawVolume) else volume)
    if channels.ndim != 4 or channels.shape[-1] != MODALITIES:
        raise LayoutError('to_channels_first', f'expected (H, W, D, {MODALITIES}), got {channels.shape}')
    return np.ascontiguousarray(np.moveaxis(channels, -1, 0))


def to_channels_last(image):
    return np.ascontiguousarray(np.moveaxis(image, 0, -1))


def collapse_labels(labels):
    """Join the three tumour classes: 0 -> 0, {1, 2, 3} -> 1"""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3 or not np.all(labels == np.round(labels))):
        raise LabelError('collapse_labels', 'labels must be in {0, 1, 2, 3}')
    return (labels > 0).astype(np.uint8)


def process_volume(volume, target_depth=None, mode='leading'):
    """standardize -> crop_depth -> to_channels_first -> collapse_labels"""
    depth = volume.labels.shape[-1]
    target_depth = default_crop_depth(depth) if target_depth is None else target_depth
    cropped = crop_depth(standardize(volume), target_depth, mode)
    image = to_channels_first(cropped).astype(np.float32)
    mask = collapse_labels(cropped.labels)[np.newaxis]
    return ProcessedSample(id=volume.id, image=image, mask=mask)


def default_crop_depth(depth):
    """Largest multiple of 8 not above ``depth`` (155 -> 152)"""
    return max(8, depth - depth % 8)


def split_sizes(n, ratios=config.deployment.ratios):
    train = int(np.floor(ratios[0] * n + 1e-9))
    val = int(np.floor(ratios[1] * n + 1e-9))
    return train, val, n - train - val


def split_dataset(n, ratios=config.deployment.ratios, seed=0):
    """Seeded shuffle split into train/val/test index lists

    train = floor(r0 * n), val = floor(r1 * n), the remainder goes to test.

    :rtype: tuple[list, list, list]
    """
    if n < 3:
        raise SplitError('split_dataset', f'need at least 3 samples, got {n}')
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError('split_dataset', f'ratios must be three non-negative values summing to 1, got {ratios}')
    train, val, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    return (sorted(int(i) for i in order[:train]),
            sorted(int(i) for i in order[train:train + val]),
            sorted(int(i) for i in order[train + val:]))


def encode_record(sample):
    """Serialise one sample to its record bytes (length prefix through crc)

    float32 and float64 images keep their dtype; any other image dtype is rejected.
    """
    image = np.asarray(sample.image)
    if image.dtype == np.float64:
        code = FLOAT64
    elif image.dtype == np.float32:
        code = FLOAT32
    else:
        raise LayoutError('encode_record', f'record {sample.id!r}: image dtype {image.dtype} is not float32 '
                                           f'or float64')
    dtype = DTYPE_CODES[code]
    image = image.astype(dtype, copy=False)
    mask = np.asarray(sample.mask).astype(dtype)
    c, h, w, d = image.shape
    payload = image.tobytes() + mask.tobytes()
    ident = sample.id.encode('utf-8')
    body = (_idLength.pack(len(ident)) + ident + _dims.pack(code, c, c + mask.shape[0], h, w, d)
            + payload + _crc.pack(zlib.crc32(payload)))
    return _length.pack(len(body)) + body


def _record_id(body, operation, expected_id=None):
    """Id and the position after it, from a record body starting at the id length"""
    try:
        (id_len,) = _idLength.unpack_from(body, 0)
        end = _idLength.size + id_len
        if end > len(body):
            raise CorruptRecord(operation, 'record id runs past the record end', record_id=expected_id)
        return body[_idLength.size:end].decode('utf-8'), end
    except struct.error:
        raise CorruptRecord(operation, 'record header is truncated', record_id=expected_id) from None
    except UnicodeDecodeError:
        raise CorruptRecord(operation, f'record id of {expected_id or "record"!r} is not valid utf-8',
                            record_id=expected_id) from None


def decode_record(blob, operation='read_records', expected_id=None):
    """Parse record bytes produced by encode_record; the crc is verified

    :param expected_id: id named in the manifest, reported when the id field itself is damaged
    :raises CorruptRecord: checksum mismatch or a damaged header field
    """
    record_id, pos = _record_id(blob[_length.size:], operation, expected_id)
    pos += _length.size
    try:
        code, image_channels, c, h, w, d = _dims.unpack_from(blob, pos)
    except struct.error:
        raise CorruptRecord(operation, f'record {record_id!r} header is truncated', record_id=record_id) from None
    pos += _dims.size
    if code not in DTYPE_CODES:
        raise CorruptRecord(operation, f'record {record_id!r} has unknown dtype code {code}', record_id=record_id)
    if image_channels >= c:
        raise CorruptRecord(operation, f'record {record_id!r} has {image_channels} image channels of {c}',
                            record_id=record_id)
    dtype = DTYPE_CODES[code]
    size = c * h * w * d * dtype.itemsize
    payload = blob[pos:pos + size]
    if len(payload) != size or len(blob) != pos + size + _crc.size:
        raise CorruptRecord(operation, f'record {record_id!r} payload length mismatch', record_id=record_id)
    (crc,) = _crc.unpack_from(blob, pos + size)
    if zlib.crc32(payload) != crc:
        raise CorruptRecord(operation, f'checksum mismatch in record {record_id!r}', record_id=record_id)
    values = np.frombuffer(payload, dtype=dtype).reshape(c, h, w, d)
    image = values[:image_channels].astype(dtype.type)
    mask = values[image_channels:].astype(np.uint8)
    return ProcessedSample(id=record_id, image=image, mask=mask)


def pack_records(samples, workers, path, ratios=config.deployment.ratios, seed=0):
    """Write samples to a record file in input order

    Encoding fans out over a process pool; pool.map keeps input order so the file bytes do not depend on
    ``workers``.

    :param samples: processed samples
    :type samples: list[ProcessedSample]
    :param workers: encoding processes
    :type workers: int
    :param path: output record file
    :type path: str
    :return: manifest of offsets and split assignment
    :rtype: DatasetManifest
    """
    if isinstance(workers, bool) or workers < 1:
        raise InvalidCount('pack_records', f'workers must be >= 1, got {workers}')
    samples = list(samples)
    if workers == 1 or len(samples) < 2:
        blobs = [encode_record(s) for s in samples]
    else:
        with multiprocessing.Pool(processes=min(workers, len(samples))) as pool:
            blobs = pool.map(encode_record, samples)

    entries = []
    offset = _header.size
    for sample, blob in zip(samples, blobs):
        entries.append(RecordEntry(sample.id, offset, len(blob)))
        offset += len(blob)

    try:
        with open(path, 'wb') as f:
            f.write(_header.pack(config.recordMagic, config.recordVersion))
            for blob in blobs:
                f.write(blob)
    except OSError as err:
        raise IoError('pack_records', f'cannot write {path}: {err.strerror or err}') from err

    ids = [s.id for s in samples]
    if len(ids) >= 3:
        train, val, test = split_dataset(len(ids), ratios, seed)
        splits = {ids[i]: name for name, part in (('train', train), ('val', val), ('test', test)) for i in part}
    else:
        if ids:
            logger.warning('only %d samples packed; all assigned to train', len(ids))
        splits = {i: 'train' for i in ids}
    logger.info('packed %d records (%d bytes) into %s', len(entries), offset, path)
    return DatasetManifest(entries=entries, splits=splits, ratios=tuple(ratios), seed=seed,
                           data_file=os.path.basename(path))


def _read_header(f, path, operation):
    head = f.read(_header.size)
    if len(head) < _header.size:
        raise IoError(operation, f'{path} is truncated')
    magic, version = _header.unpack(head)
    if magic != config.recordMagic or version != config.recordVersion:
        raise IoError(operation, f'{path} is not a version {config.recordVersion} record file')


def read_records(path, manifest):
    """Read every manifest entry back, in manifest order

    :raises CorruptRecord: checksum mismatch, naming the record id
    :raises IoError: missing or truncated file
    """
    samples = []
    try:
        with open(path, 'rb') as f:
            _read_header(f, path, 'read_records')
            for entry in manifest.entries:
                f.seek(entry.offset)
                blob = f.read(entry.length)
                if len(blob) < entry.length:
                    raise IoError('read_records', f'{path} truncated inside record {entry.id!r}')
                sample = decode_record(blob, expected_id=entry.id)
                if sample.id != entry.id:
                    raise CorruptRecord('read_records', f'expected record {entry.id!r}, found {sample.id!r}',
                                        record_id=entry.id)
                samples.append(sample)
    except IoError:
        raise
    except OSError as err:
        raise IoError('read_records', f'cannot read {path}: {err.strerror or err}') from err
    return samples


def scan_records(path):
    """Rebuild (id, offset, length) entries by walking the record file"""
    entries = []
    try:
        with open(path, 'rb') as f:
            _read_header(f, path, 'scan_records')
            offset = _header.size
            while True:
                prefix = f.read(_length.size)
                if not prefix:
                    break
                if len(prefix) < _length.size:
                    raise IoError('scan_records', f'{path} truncated at offset {offset}')
                (body_len,) = _length.unpack(prefix)
                body = f.read(body_len)
                if len(body) < body_len:
                    raise IoError('scan_records', f'{path} truncated at offset {offset}')
                record_id, _ = _record_id(body, 'scan_records')
                entries.append(RecordEntry(record_id, offset, _length.size + body_len))
                offset += _length.size + body_len
    except IoError:
        raise
    except OSError as err:
        raise IoError('scan_records', f'cannot read {path}: {err.strerror or err}') from err
    return entries


def manifest_path(data_path):
    return os.path.splitext(data_path)[0] + '.manifest.yaml'


def write_manifest(manifest, path):
    try:
        with open(path, 'w') as f:
            yaml.safe_dump(manifest.to_dict(), f, sort_keys=False)
    except OSError as err:
        raise IoError('write_manifest', f'cannot write {path}: {err.strerror or err}') from err


def load_manifest(path):
    try:
        with open(path) as f:
            return DatasetManifest.from_dict(yaml.safe_load(f) or {})
    except OSError as err:
        raise IoError('load_manifest', f'cannot read {path}: {err.strerror or err}') from err
