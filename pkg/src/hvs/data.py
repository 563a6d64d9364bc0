"""Synthetic identity-cluster data, open-set splits and their file formats.

Dataset file (``.hvsd``), little-endian::

    b"HVSD" | version u32 | n u32 | dim u32 | class_count u32
    | n*dim float32 features (row-major) | n uint32 labels

Split file (``.hvss``) stores the dataset once plus one part code per sample::

    b"HVSS" | version u32 | dataset record (as above, without magic/version)
    | n uint8 part codes (0 train, 1 val, 2 gallery, 3 mated probe, 4 non-mated probe)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import FLOAT, l2_normalize

DATASET_MAGIC = b"HVSD"
SPLIT_MAGIC = b"HVSS"
FORMAT_VERSION = 1
PARTS = ("train", "val", "test_gallery", "test_probe_mated", "test_probe_nonmated")


class DataFormatError(ValueError):
    pass


class SplitConfigurationError(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) identity ids
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def identities(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)

    def missing_classes(self) -> np.ndarray:
        counts = np.bincount(self.labels, minlength=self.class_count)
        return np.flatnonzero(counts == 0)

    def compact(self) -> tuple["LabeledDataset", np.ndarray]:
        """Relabel to ``0..k-1`` over present identities; returns the id map too."""
        ids, labels = np.unique(self.labels, return_inverse=True)
        return LabeledDataset(self.features, labels, max(len(ids), 1)), ids

    def __eq__(self, other) -> bool:
        return (isinstance(other, LabeledDataset) and self.class_count == other.class_count
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def generate_synthetic(num_identities: int, samples_per_identity: int, input_dim: int,
                       noise_sigma: float, seed: int, latent_dim: int | None = None) -> LabeledDataset:
    """Unit-sphere identity prototypes with normalized gaussian jitter.

    With ``latent_dim < input_dim`` the prototypes live on the unit sphere of
    a random ``latent_dim``-dimensional subspace while the jitter stays
    isotropic, so a model can learn which directions carry identity.
    ``latent_dim=None`` (or ``input_dim``) is the plain isotropic generator.
    """
    if num_identities < 2 or samples_per_identity < 1 or input_dim < 2 or noise_sigma < 0:
        raise ValueError("need >= 2 identities, >= 1 sample each, dim >= 2 and noise >= 0")
    if latent_dim is not None and not 1 <= latent_dim <= input_dim:
        raise ValueError("latent_dim must lie in [1, input_dim]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    if latent_dim is None or latent_dim == input_dim:
        protos = l2_normalize(rng.standard_normal((num_identities, input_dim)))
    else:
        basis_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED, 1]))
        basis, _ = np.linalg.qr(basis_rng.standard_normal((input_dim, latent_dim)))
        protos = l2_normalize(rng.standard_normal((num_identities, latent_dim))) @ basis.T
    labels = np.repeat(np.arange(num_identities), samples_per_identity)
    noise = rng.standard_normal((labels.size, input_dim))
    features = l2_normalize(protos[labels] + noise_sigma * noise)
    return LabeledDataset(features.astype(FLOAT), labels, num_identities)


@dataclass
class OpenSetSplit:
    dataset: LabeledDataset
    parts: np.ndarray  # uint8 part code per sample

    @property
    def train(self) -> LabeledDataset:
        return self.part("train")

    @property
    def val(self) -> LabeledDataset:
        return self.part("val")

    @property
    def test_gallery(self) -> LabeledDataset:
        return self.part("test_gallery")

    @property
    def test_probe_mated(self) -> LabeledDataset:
        return self.part("test_probe_mated")

    @property
    def test_probe_nonmated(self) -> LabeledDataset:
        return self.part("test_probe_nonmated")

    def part(self, name: str) -> LabeledDataset:
        return self.dataset.subset(np.flatnonzero(self.parts == PARTS.index(name)))

    def val_protocol(self, gallery_per_id: int = 1) -> tuple[LabeledDataset, LabeledDataset]:
        """Split validation identities into (gallery, probe) by sample order."""
        val = self.val
        gal, probe = [], []
        seen: dict[int, int] = {}
        for i, y in enumerate(val.labels):
            seen[y] = seen.get(y, 0) + 1
            (gal if seen[y] <= gallery_per_id else probe).append(i)
        return val.subset(gal), val.subset(probe)


def make_open_set_split(dataset: LabeledDataset, train_frac: float = 5 / 6, val_frac: float = 1 / 6,
                        gallery_per_id: int = 2, nonmated_id_frac: float = 0.25, seed: int = 0,
                        test_id_frac: float = 1 / 7) -> OpenSetSplit:
    """Identity-level open-set protocol.

    ``test_id_frac`` of the identities are held out for testing.  The rest
    are divided by identity into train (``train_frac``) and validation
    (``val_frac``); the two fractions must sum to 1.  Within the test
    identities, ``nonmated_id_frac`` are withheld from the gallery and become
    non-mated probes; the others contribute their first ``gallery_per_id``
    samples to the gallery and the remainder to the mated probes.
    """
    for name, frac in (("train_frac", train_frac), ("val_frac", val_frac), ("test_id_frac", test_id_frac)):
        if not 0 < frac < 1:
            raise SplitConfigurationError(f"{name} must lie in (0, 1)")
    if abs(train_frac + val_frac - 1.0) > 1e-9:
        raise SplitConfigurationError("train_frac + val_frac must equal 1")
    if not 0 <= nonmated_id_frac < 1:
        raise SplitConfigurationError("nonmated_id_frac must lie in [0, 1)")
    if gallery_per_id < 1:
        raise SplitConfigurationError("gallery_per_id must be at least 1")

    ids = dataset.identities()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    ids = ids[rng.permutation(len(ids))]
    n_test = int(round(len(ids) * test_id_frac))
    pool = len(ids) - n_test
    n_val = int(round(pool * val_frac))
    n_train = pool - n_val
    n_nonmated = int(round(n_test * nonmated_id_frac))
    n_mated = n_test - n_nonmated
    if min(n_train, n_val, n_mated) < 2 or (nonmated_id_frac > 0 and n_nonmated < 1):
        raise SplitConfigurationError(
            f"{len(ids)} identities cannot satisfy the requested fractions "
            f"(train={n_train}, val={n_val}, mated={n_mated}, non-mated={n_nonmated})")

    train_ids = ids[:n_train]
    val_ids = ids[n_train:pool]
    mated_ids = ids[pool:pool + n_mated]
    nonmated_ids = ids[pool + n_mated:]

    parts = np.full(len(dataset), 255, dtype=np.uint8)
    labels = dataset.labels
    parts[np.isin(labels, train_ids)] = 0
    parts[np.isin(labels, val_ids)] = 1
    parts[np.isin(labels, nonmated_ids)] = 4
    for y in mated_ids:
        rows = np.flatnonzero(labels == y)
        if len(rows) <= gallery_per_id:
            raise SplitConfigurationError(
                f"identity {y} has {len(rows)} samples; gallery_per_id={gallery_per_id} leaves no probe")
        parts[rows[:gallery_per_id]] = 2
        parts[rows[gallery_per_id:]] = 3
    return OpenSetSplit(dataset, parts)


# -- file formats -------------------------------------------------------------

def _dataset_bytes(ds: LabeledDataset) -> bytes:
    missing = ds.missing_classes()
    if missing.size:
        raise DataFormatError(f"classes without samples: {missing[:10].tolist()}")
    n, d = ds.features.shape
    return b"".join([
        struct.pack("<III", n, d, ds.class_count),
        np.ascontiguousarray(ds.features, dtype="<f4").tobytes(),
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes(),
    ])


def _parse_dataset(data: bytes, pos: int, path) -> tuple[LabeledDataset, int]:
    try:
        n, d, classes = struct.unpack_from("<III", data, pos)
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated header") from exc
    pos += 12
    end = pos + 4 * n * d + 4 * n
    if end > len(data):
        raise DataFormatError(f"{path}: truncated payload")
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).astype(FLOAT).reshape(n, d)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=pos + 4 * n * d).astype(np.int64)
    try:
        ds = LabeledDataset(feats, labels, classes)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return ds, end


def _check_header(data: bytes, magic: bytes, path) -> None:
    if len(data) < 8 or data[:4] != magic:
        raise DataFormatError(f"{path}: bad magic, expected {magic!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")


def save_dataset(path, ds: LabeledDataset) -> None:
    Path(path).write_bytes(DATASET_MAGIC + struct.pack("<I", FORMAT_VERSION) + _dataset_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    data = Path(path).read_bytes()
    _check_header(data, DATASET_MAGIC, path)
    ds, end = _parse_dataset(data, 8, path)
    if end != len(data):
        raise DataFormatError(f"{path}: trailing bytes")
    return ds


def save_split(path, split: OpenSetSplit) -> None:
    Path(path).write_bytes(SPLIT_MAGIC + struct.pack("<I", FORMAT_VERSION)
                           + _dataset_bytes(split.dataset) + split.parts.astype(np.uint8).tobytes())


def load_split(path) -> OpenSetSplit:
    data = Path(path).read_bytes()
    _check_header(data, SPLIT_MAGIC, path)
    ds, pos = _parse_dataset(data, 8, path)
    if len(data) - pos != len(ds):
        raise DataFormatError(f"{path}: expected {len(ds)} part codes, found {len(data) - pos} bytes")
    parts = np.frombuffer(data, dtype=np.uint8, offset=pos).copy()
    if parts.size and parts.max() >= len(PARTS):
        raise DataFormatError(f"{path}: unknown part code {parts.max()}")
    return OpenSetSplit(ds, parts)


def augment(features: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian jitter plus re-normalization; the identity when ``sigma == 0``."""
    if sigma == 0:
        return features
    noisy = features + sigma * rng.standard_normal(features.shape).astype(features.dtype)
    return l2_normalize(noisy).astype(features.dtype)
