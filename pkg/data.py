"""
Training data sources.

generate_locality_dataset draws the synthetic 2D-locality task: each
image holds one coherent square blob inside one quadrant plus scattered
isolated bright pixels; the label is the blob's quadrant. load_idx reads
image/label pairs in the big-endian IDX format. iterate_batches hands
batches to the training loop from a bounded producer thread.
"""

import logging
import queue
import struct
from dataclasses import dataclass
from threading import Event, Thread
from typing import Iterator, Optional, Tuple

import numpy as np

from numerics import ConfigError, CountMismatchError, FormatError, Rng, TruncatedPayloadError


logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledSamples:
    """images (n, h, w, c) in [0, 1], labels (n,) int64."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> 'LabeledSamples':
        return LabeledSamples(self.images[index], self.labels[index])


@dataclass(frozen=True)
class LocalityTaskSpec:
    """Synthetic quadrant-blob task."""

    image_size: int = 16
    channels: int = 1
    num_classes: int = 4
    blob_size: int = 4          # blob side in pixels
    blob_value: float = 1.0
    noise_std: float = 0.1
    distractors: int = 8        # isolated bright pixels per image
    seed: int = 0
    n_train: int = 2000
    n_test: int = 500

    def validate(self):
        if self.num_classes != 4:
            raise ConfigError(f"the locality task has 4 quadrant classes, got {self.num_classes}")
        if self.image_size % 2:
            raise ConfigError(f"image size must be even to form quadrants, got {self.image_size}")
        if not 1 <= self.blob_size <= self.image_size // 2:
            raise ConfigError(f"blob size {self.blob_size} does not fit a "
                              f"{self.image_size // 2}-pixel quadrant")
        if self.noise_std < 0 or self.distractors < 0:
            raise ConfigError("noise_std and distractors must be >= 0")
        if not 0.0 < self.blob_value <= 1.0:
            raise ConfigError("blob_value must lie in (0, 1]")


def _draw_split(spec: LocalityTaskSpec, n: int, rng: Rng) -> LabeledSamples:
    size, half, s = spec.image_size, spec.image_size // 2, spec.blob_size
    labels = np.arange(n, dtype=np.int64) % 4
    labels = labels[rng.permutation(n)]
    images = np.zeros((n, size, size, spec.channels))
    if spec.noise_std > 0:
        images += np.abs(rng.normal(images.shape, 0.0, spec.noise_std))
    for idx in range(n):
        if spec.distractors:
            rows = rng.integers(0, size, spec.distractors)
            cols = rng.integers(0, size, spec.distractors)
            images[idx, rows, cols, :] = spec.blob_value
        quadrant = int(labels[idx])
        top = (quadrant // 2) * half + int(rng.integers(0, half - s + 1))
        left = (quadrant % 2) * half + int(rng.integers(0, half - s + 1))
        images[idx, top:top + s, left:left + s, :] = spec.blob_value
    return LabeledSamples(np.clip(images, 0.0, 1.0), labels)


def generate_locality_dataset(spec: LocalityTaskSpec) -> Tuple[LabeledSamples, LabeledSamples]:
    """
    Deterministic (train, test) splits of the quadrant-blob task.

    Quadrant index: 0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right.
    Labels are balanced to within one per class.

    Args:
        spec: task specification

    Returns:
        (train, test) LabeledSamples
    """
    spec.validate()
    rng = Rng(spec.seed)
    train = _draw_split(spec, spec.n_train, rng.spawn('locality.train'))
    test = _draw_split(spec, spec.n_test, rng.spawn('locality.test'))
    logger.info(f"Generated locality task: {len(train)} train / {len(test)} test samples")
    return train, test


def _read_header(f, path: str, magic: int, dims: int) -> Tuple[int, ...]:
    raw = f.read(4 + 4 * dims)
    if len(raw) < 4:
        raise TruncatedPayloadError("file shorter than its magic number", path)
    (found,) = struct.unpack('>I', raw[:4])
    if found != magic:
        raise FormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path)
    if len(raw) < 4 + 4 * dims:
        raise TruncatedPayloadError("header ends early", path)
    return struct.unpack(f'>{dims}I', raw[4:])


def _read_payload(f, path: str, count: int) -> np.ndarray:
    payload = f.read(count)
    if len(payload) < count:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header declares {count}", path)
    return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path: str, labels_path: str) -> LabeledSamples:
    """
    Read an IDX image file and its label file.

    Args:
        images_path: file with magic 0x00000803, dims (count, rows, cols), u8 pixels
        labels_path: file with magic 0x00000801, dim (count,), u8 labels

    Returns:
        LabeledSamples with images (count, rows, cols, 1) scaled to [0, 1]
    """
    with open(images_path, 'rb') as f:
        count, rows, cols = _read_header(f, images_path, IDX_IMAGES_MAGIC, 3)
        pixels = _read_payload(f, images_path, count * rows * cols)
    with open(labels_path, 'rb') as f:
        (label_count,) = _read_header(f, labels_path, IDX_LABELS_MAGIC, 1)
        labels = _read_payload(f, labels_path, label_count)
    if count != label_count:
        raise CountMismatchError(f"{images_path} holds {count} images but "
                                 f"{labels_path} holds {label_count} labels")
    images = pixels.reshape(count, rows, cols, 1).astype(np.float64) / 255.0
    logger.info(f"Loaded {count} IDX samples of {rows}x{cols} from {images_path}")
    return LabeledSamples(images, labels.astype(np.int64))


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray):
    """Write u8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    n, rows, cols = images.shape
    with open(images_path, 'wb') as f:
        f.write(struct.pack('>4I', IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.asarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, 'wb') as f:
        f.write(struct.pack('>2I', IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def split_holdout(samples: LabeledSamples, fraction: float) -> Tuple[LabeledSamples, LabeledSamples]:
    """Use the trailing fraction of samples as the held-out split."""
    n_test = max(1, int(round(len(samples) * fraction)))
    cut = len(samples) - n_test
    return samples.subset(slice(0, cut)), samples.subset(slice(cut, None))


_END = object()


class BatchProducer:
    """Background thread that prepares batches ahead of the compute step."""

    def __init__(self, samples: LabeledSamples, batch_size: int, order: np.ndarray,
                 flip_rng: Optional[Rng] = None, prefetch: int = 2, dtype=np.float32):
        """
        Initialize the producer.

        Args:
            samples: source samples
            batch_size: samples per batch
            order: sample order for this pass
            flip_rng: random stream for horizontal flips, None disables flipping
            prefetch: maximum batches waiting in the queue
            dtype: image dtype handed to the model
        """
        self.samples = samples
        self.batch_size = batch_size
        self.order = order
        self.flip_rng = flip_rng
        self.dtype = dtype
        self.queue: 'queue.Queue' = queue.Queue(maxsize=max(1, prefetch))
        self.stop_event = Event()
        self.thread: Optional[Thread] = None
        self.error: Optional[BaseException] = None
        self.logger = logging.getLogger(__name__)

    def _put(self, item) -> bool:
        while not self.stop_event.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce(self):
        """Producer loop running in the background thread."""
        try:
            for start in range(0, len(self.order), self.batch_size):
                index = self.order[start:start + self.batch_size]
                images = self.samples.images[index].astype(self.dtype)
                if self.flip_rng is not None:
                    flips = self.flip_rng.uniform((len(index),)) < 0.5
                    images[flips] = images[flips, :, ::-1]
                if not self._put((images, self.samples.labels[index])):
                    return
        except Exception as e:
            self.logger.error(f"Batch producer failed: {e}")
            self.error = e
        finally:
            self._put(_END)

    def start(self):
        self.stop_event.clear()
        self.thread = Thread(target=self.produce, daemon=True)
        self.thread.start()

    def stop(self):
        self.stop_event.set()
        if self.thread:
            self.thread.join(timeout=10)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        self.start()
        try:
            while True:
                item = self.queue.get()
                if item is _END:
                    break
                yield item
            if self.error is not None:
                raise self.error
        finally:
            self.stop()


def iterate_batches(samples: LabeledSamples, batch_size: int, rng: Optional[Rng] = None,
                    augment_flip: bool = False, prefetch: int = 2,
                    dtype=np.float32) -> BatchProducer:
    """
    Batches in a seed-determined order (sequential order when rng is None).

    Args:
        samples: source samples
        batch_size: samples per batch
        rng: shuffling stream; also seeds the flip stream
        augment_flip: randomly mirror images left-right
        prefetch: batches the producer may run ahead
        dtype: image dtype

    Returns:
        Iterable BatchProducer yielding (images, labels)
    """
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    flip_rng = rng.spawn('flip') if (augment_flip and rng is not None) else None
    return BatchProducer(samples, batch_size, order, flip_rng, prefetch, dtype)
