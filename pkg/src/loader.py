"""
Multi-worker prefetching dataloader with a bounded sample queue

Producers claim sample positions in shuffled order, decode + window + augment
them, and push them into a queue holding at most queue_ratio * batch_size
samples. The consumer reassembles batches in shuffled order, so batch content
never depends on worker count or timing.
"""
import logging
import queue
import threading
import time
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.augment import augment_pair, sample_rng
from src.ct_ingest import load_norm_image
from src.manifest import read_mask
from src.models import Batch, LoaderConfig, LoaderStats, SampleRecord, WindowSpec
from src.tensor_ops import default_dtype

logger = logging.getLogger(__name__)


class LoaderError(RuntimeError):
    """A sample could not be produced; the epoch is aborted"""


class _EpochState:
    """Shared state of one running epoch"""

    def __init__(self, order: np.ndarray, capacity: int, workers: int):
        self.order = order
        self.queue: "queue.Queue" = queue.Queue(maxsize=capacity)
        self.slots = threading.Semaphore(capacity)
        self.stop = threading.Event()
        self.lock = threading.Lock()
        self.next_position = 0
        self.occupancy = 0
        self.max_occupancy = 0
        self.busy = [0.0] * workers

    def claim(self) -> int:
        with self.lock:
            position = self.next_position
            self.next_position += 1
            return position

    def pushed(self):
        with self.lock:
            self.occupancy += 1
            self.max_occupancy = max(self.max_occupancy, self.occupancy)

    def consumed(self) -> int:
        with self.lock:
            current = self.occupancy
            self.occupancy -= 1
        self.slots.release()
        return current


class Loader:
    """Epoch iterator over a view of samples"""

    def __init__(
        self,
        view: Sequence[SampleRecord],
        cfg: LoaderConfig,
        root: Optional[Path] = None,
        window: Optional[WindowSpec] = None,
        decode_delay: float = 0.0,
        dtype=None,
    ):
        if not view:
            raise ValueError("loader view is empty")
        self.view = list(view)
        self.cfg = cfg
        self.root = Path(root) if root is not None else None
        self.window = window or WindowSpec()
        self.decode_delay = decode_delay
        self.dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        self.epoch = 0
        self.history: List[LoaderStats] = []
        self._active: Optional[Iterator[Batch]] = None

    def __len__(self) -> int:
        """Batches per epoch"""
        return -(-len(self.view) // self.cfg.batch_size)

    # -- ordering -------------------------------------------------------------

    def epoch_order(self, epoch: int) -> np.ndarray:
        if not self.cfg.shuffle:
            return np.arange(len(self.view))
        return np.random.default_rng([self.cfg.shuffle_seed, epoch]).permutation(len(self.view))

    def batch_plan(self, epoch: int) -> List[List[int]]:
        """Sample indices of every batch of an epoch, last partial batch kept"""
        order = self.epoch_order(epoch).tolist()
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    # -- sample production ----------------------------------------------------

    def _path(self, rel: str) -> Path:
        return self.root / rel if self.root is not None else Path(rel)

    def load_sample(self, index: int, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
        """Decode, window and (optionally) augment one sample"""
        record = self.view[index]
        if self.decode_delay:
            time.sleep(self.decode_delay)
        image = load_norm_image(self._path(record.image_path), self.window)
        if record.mask_path is None:
            mask = np.zeros(image.shape, dtype=np.uint8)
        else:
            mask = read_mask(self._path(record.mask_path))
        if mask.shape != image.shape:
            raise ValueError(f"mask {mask.shape} does not match image {image.shape}")
        if self.cfg.augment is not None:
            rng = sample_rng(self.cfg.shuffle_seed, epoch, index)
            image, mask, _ = augment_pair(image, mask, rng, self.cfg.augment)
        return image, mask

    def _worker(self, worker_id: int, state: _EpochState, epoch: int):
        n = len(state.order)
        while not state.stop.is_set():
            if not state.slots.acquire(timeout=0.05):
                continue
            position = state.claim()
            if position >= n:
                state.slots.release()
                return
            index = int(state.order[position])
            started = time.perf_counter()
            try:
                payload = self.load_sample(index, epoch)
                error = None
            except Exception as e:
                payload, error = None, e
            state.busy[worker_id] += time.perf_counter() - started
            state.queue.put((position, payload, error))
            state.pushed()
            if error is not None:
                return

    # -- consumption ----------------------------------------------------------

    def iter_epoch(self, epoch: Optional[int] = None) -> Iterator[Batch]:
        """Run one epoch, yielding batches in shuffled order"""
        if epoch is None:
            epoch = self.epoch
        self.epoch = epoch + 1
        order = self.epoch_order(epoch)
        n = len(order)
        bs = self.cfg.batch_size
        state = _EpochState(order, self.cfg.capacity, self.cfg.workers)
        threads = [
            threading.Thread(target=self._worker, args=(w, state, epoch), name=f"loader-{w}", daemon=True)
            for w in range(self.cfg.workers)
        ]
        started = time.perf_counter()
        for t in threads:
            t.start()

        ready = {}
        wait_total = 0.0
        occupancy_samples = []
        batches = 0
        try:
            for first in range(0, n, bs):
                positions = range(first, min(first + bs, n))
                images, masks, ids = [], [], []
                batch_wait = 0.0
                for position in positions:
                    while position not in ready:
                        t0 = time.perf_counter()
                        got_position, payload, error = state.queue.get()
                        batch_wait += time.perf_counter() - t0
                        if error is not None:
                            sample_id = self.view[int(order[got_position])].sample_id
                            raise LoaderError(f"failed to load sample {sample_id}: {error}") from error
                        ready[got_position] = payload
                    image, mask = ready.pop(position)
                    occupancy_samples.append(state.consumed())
                    images.append(image)
                    masks.append(mask)
                    ids.append(self.view[int(order[position])].sample_id)
                wait_total += batch_wait
                batches += 1
                yield Batch(
                    images=np.stack(images)[:, None].astype(self.dtype),
                    masks=(np.stack(masks)[:, None] > 0).astype(self.dtype),
                    sample_ids=ids,
                )
        finally:
            state.stop.set()
            for t in threads:
                t.join()

        elapsed = max(time.perf_counter() - started, 1e-9)
        stats = LoaderStats(
            epoch=epoch,
            samples=n,
            batches=batches,
            epoch_seconds=elapsed,
            samples_per_second=n / elapsed,
            mean_wait_seconds=wait_total / max(batches, 1),
            mean_queue_occupancy=float(np.mean(occupancy_samples)) if occupancy_samples else 0.0,
            max_queue_occupancy=state.max_occupancy,
            worker_busy_fraction=[min(b / elapsed, 1.0) for b in state.busy],
        )
        self.history.append(stats)
        logger.debug("Epoch %d loaded: %d samples in %.3fs", epoch, n, elapsed)

    def __iter__(self) -> Iterator[Batch]:
        return self.iter_epoch()

    def start_epoch(self, epoch: Optional[int] = None):
        if self._active is not None:
            self._active.close()
        self._active = self.iter_epoch(epoch)

    def next_batch(self) -> Optional[Batch]:
        """Next batch of the active epoch, or None at end of epoch"""
        if self._active is None:
            raise RuntimeError("no active epoch; call start_epoch() first")
        try:
            return next(self._active)
        except StopIteration:
            self._active = None
            return None

    def epoch_stats(self) -> LoaderStats:
        """Throughput report of the most recently completed epoch"""
        if not self.history:
            raise RuntimeError("no completed epoch yet")
        return self.history[-1]
