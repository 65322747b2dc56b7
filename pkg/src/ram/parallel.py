"""Batch-level data parallelism: per-example graphs in forked workers.

Parameters live in one shared float32 buffer that the master's tensors
view directly, so the Adam update is immediately visible to workers. Each
worker owns a shared gradient buffer; the master reduces the buffers in
worker order, which keeps a run bit-reproducible for a fixed worker count.
Loss values are written per example, so logged losses do not depend on the
worker count at all.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .model import ModelParams, init_model, param_store

_LOSS_FIELDS = 5


def _flat_layout(store) -> list[tuple[str, tuple[int, ...], int, int]]:
    layout = []
    offset = 0
    for name, tensor in store.items():
        size = int(tensor.values.size)
        layout.append((name, tensor.values.shape, offset, size))
        offset += size
    return layout


def _views(buffer, layout) -> dict[str, np.ndarray]:
    flat = np.frombuffer(buffer, dtype=np.float32)
    return {
        name: flat[offset : offset + size].reshape(shape)
        for name, shape, offset, size in layout
    }


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        pass


class GradientWorkers:
    """Forked workers computing summed mini-batch gradients."""

    def __init__(self, model: ModelParams, store, encoded: Sequence, config: ModelConfig,
                 answer_token_ids: np.ndarray, vocab_size: int):
        ctx = mp.get_context("fork")
        self.n_workers = config.workers
        self.layout = _flat_layout(store)
        total = sum(size for _, _, _, size in self.layout)
        self.param_buf = ctx.RawArray("f", total)
        self.grad_bufs = [ctx.RawArray("f", total) for _ in range(self.n_workers)]
        self.loss_buf = ctx.RawArray("d", max(1, config.batch_size) * _LOSS_FIELDS)
        self.barrier = ctx.Barrier(self.n_workers + 1)
        self.queues = [ctx.SimpleQueue() for _ in range(self.n_workers)]

        # rebind the master tensors onto the shared buffer (zero-copy updates)
        param_views = _views(self.param_buf, self.layout)
        for name, tensor in store.items():
            view = param_views[name]
            view[...] = tensor.values
            tensor.values = view

        self._grad_views = [_views(buf, self.layout) for buf in self.grad_bufs]
        self._losses = np.frombuffer(self.loss_buf, dtype=np.float64).reshape(-1, _LOSS_FIELDS)
        self.procs = [
            ctx.Process(
                target=_worker_main,
                args=(w, self.n_workers, self.queues[w], self.barrier, self.param_buf,
                      self.grad_bufs[w], self.loss_buf, self.layout, encoded, config,
                      answer_token_ids, vocab_size),
                daemon=True,
            )
            for w in range(self.n_workers)
        ]
        for p in self.procs:
            p.start()
        _limit_blas_threads()

    def run_batch(self, epoch: int, batch: np.ndarray):
        """Dispatch one batch; returns (per-example losses, summed gradients)."""
        indices = [int(i) for i in batch]
        for q in self.queues:
            q.put((epoch, indices))
        self.barrier.wait()
        losses = self._losses[: len(indices)].copy()
        grads: dict[str, np.ndarray] = {}
        for views in self._grad_views:
            for name, _, _, _ in self.layout:
                g = views[name]
                if not g.any():
                    continue
                held = grads.get(name)
                grads[name] = g.copy() if held is None else held + g
        return losses, grads

    def close(self):
        for q in self.queues:
            q.put(None)
        for p in self.procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()


def _worker_main(worker_id: int, n_workers: int, queue, barrier, param_buf, grad_buf,
                 loss_buf, layout, encoded, config: ModelConfig,
                 answer_token_ids, vocab_size: int):
    # deferred import keeps fork cheap and avoids a circular import
    from .trainer import _train_step_encoded, example_rng

    _limit_blas_threads()
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

    model = init_model(config, vocab_size)
    store = param_store(model)
    param_views = _views(param_buf, layout)
    for name, tensor in store.items():
        tensor.values = param_views[name]
    grad_views = _views(grad_buf, layout)
    losses = np.frombuffer(loss_buf, dtype=np.float64).reshape(-1, _LOSS_FIELDS)

    while True:
        task = queue.get()
        if task is None:
            break
        epoch, indices = task
        try:
            for view in grad_views.values():
                view[...] = 0.0
            for pos in range(worker_id, len(indices), n_workers):
                ex = encoded[indices[pos]]
                breakdown, grads = _train_step_encoded(
                    model, store, ex, config,
                    example_rng(config.seed, epoch, ex.index), answer_token_ids,
                )
                losses[pos] = (breakdown.qa, breakdown.rehearsal,
                               breakdown.anticipation, breakdown.binary, breakdown.total)
                for name, g in grads.items():
                    grad_views[name] += g
        except BaseException:
            # surface the failure to the master instead of deadlocking
            barrier.abort()
            raise
        barrier.wait()
