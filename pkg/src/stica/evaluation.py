"""Evaluation: retrieval, probing, audio-visual heatmaps, crop-cost benchmark.

Retrieval scores trunk features (pre-pooling, spatial max then clip
average); the probe attaches a classifier to the pooled feature and
optionally finetunes the whole network on the staged decay schedule.
The benchmark times forward+backward of the within-modal pipeline under
the two cropping strategies at matched view counts.
"""

import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .augment import input_crop_resize, sample_crop_offsets, sample_crop_tube
from .data import iterate_batches
from .losses import nce_loss
from .nn import linear as nn_linear
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    backward,
    concat,
    logsumexp,
    no_grad,
    recording,
)
from .training import SGD, ScheduleSpec, lr_schedule

__all__ = [
    "RetrievalIndex",
    "BenchRow",
    "BenchmarkError",
    "extract_video_embedding",
    "build_retrieval_index",
    "retrieval_recall",
    "softmax_cross_entropy",
    "finetune_probe",
    "av_heatmap",
    "write_heatmap_pgm",
    "crop_cost_benchmark",
    "append_results_csv",
    "BENCH_HEADER",
    "RESULTS_HEADER",
]

RESULTS_HEADER = "metric,k_or_mode,value"
BENCH_HEADER = "strategy,k,mean_ms,std_ms,peak_bytes"


class BenchmarkError(RuntimeError):
    """Benchmark configuration cannot produce trustworthy timings."""


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalIndex:
    features: np.ndarray  # (G, dim)
    labels: np.ndarray  # (G,)


def extract_video_embedding(video, model, num_clips=10):
    """Uniformly spaced clips -> trunk features -> spatial max pool per clip
    -> average over clips, flattened to one vector."""
    if video.ndim != 4 or video.shape[1] == 0:
        raise ShapeError(f"video shape {video.shape} is empty or not (C, T, H, W)")
    t = video.shape[1]
    clip_len = model.visual_cfg.ref_input[0]
    if t < clip_len:
        raise ShapeError(f"video has {t} frames, encoder expects >= {clip_len}")
    starts = np.round(np.linspace(0, t - clip_len, num_clips)).astype(int)
    clips = np.stack([video[:, s : s + clip_len] for s in starts])
    with no_grad():
        feats = model.visual(Tensor(clips)).data  # (num_clips, D, T1, H1, W1)
    per_clip = feats.max(axis=(3, 4))  # spatial max -> (num_clips, D, T1)
    return per_clip.mean(axis=0).reshape(-1)


def build_retrieval_index(instances, model, num_clips=10):
    feats = np.stack([extract_video_embedding(i.video, model, num_clips)
                      for i in instances])
    labels = np.array([i.class_id for i in instances])
    return RetrievalIndex(feats, labels)


def _normalize(mat, what):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError(f"{what} contains a zero feature row")
    return mat / norms


def retrieval_recall(query_feats, query_labels, index, ks=(1, 5, 20)):
    """Fraction of queries with a same-class gallery item among the top-k
    cosine neighbors; ties broken toward the lower gallery index."""
    if index.features.shape[0] == 0:
        raise ValueError("empty gallery")
    if query_feats.shape[1] != index.features.shape[1]:
        raise ShapeError(
            f"query dim {query_feats.shape[1]} != gallery dim {index.features.shape[1]}")
    sims = _normalize(query_feats, "queries") @ _normalize(index.features, "gallery").T
    order = np.argsort(-sims, axis=1, kind="stable")
    out = {}
    for k in ks:
        if k > index.features.shape[0]:
            raise ValueError(f"k={k} exceeds gallery size {index.features.shape[0]}")
        top = index.labels[order[:, :k]]
        out[int(k)] = float(np.mean(np.any(top == np.asarray(query_labels)[:, None],
                                           axis=1)))
    return out


# ---------------------------------------------------------------------------
# probe / finetune
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    n, c = logits.shape
    onehot = np.eye(c)[np.asarray(labels)]
    lse = logsumexp(logits, axis=1)
    pos = (logits * Tensor(onehot)).sum(axis=1)
    return (lse - pos).mean()


def _probe_features(model, videos, plan, rng):
    """Pooled features of a video batch plus optional feature-crop views."""
    feat = model.visual(Tensor(np.stack(videos)))
    featlist = [model.pooled_feature(feat)]
    if plan is not None:
        from .augment import _per_sample_crop

        for _, spatial, temporal in plan.crop_specs():
            view, t0s = _per_sample_crop(feat, spatial, temporal, rng)
            featlist.append(model.pooled_feature(view, None, t0s))
    return featlist


def finetune_probe(dataset, model, mode="linear", use_feature_crops=False, plan=None,
                   epochs=12, batch_size=32, schedule=None, momentum=0.9,
                   weight_decay=0.005, rng=None):
    """Train a classifier head on pooled features; `linear` freezes the
    backbone, `full` finetunes everything on the staged decay schedule.
    Returns test accuracy."""
    if mode not in ("linear", "full"):
        raise ValueError(f"unknown probe mode {mode!r}")
    if use_feature_crops and plan is None:
        raise ValueError("use_feature_crops needs a crop plan")
    rng = rng or np.random.default_rng(0)
    num_classes = dataset.spec.num_classes
    d = model.feature_dim
    head_w = Tensor(np.zeros((d, num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(num_classes), requires_grad=True)
    head_params = OrderedDict([("probe.w", head_w), ("probe.b", head_b)])
    if mode == "full":
        train_params = OrderedDict(model.named_parameters())
        train_params.update(head_params)
    else:
        train_params = head_params
    steps_per_epoch = max(1, len(dataset.train) // batch_size)
    schedule = schedule or ScheduleSpec(base_lr=0.02, warmup_epochs=2,
                                        steps_per_epoch=steps_per_epoch,
                                        policy="step", milestones=(6, 10), factor=0.05)
    opt = SGD(train_params, momentum=momentum, weight_decay=weight_decay)
    crop_plan = plan if use_feature_crops else None
    step = 0
    for _ in range(epochs):
        for batch in iterate_batches(dataset.train, min(batch_size, len(dataset.train)),
                                     rng):
            videos = [inst.video for inst in batch]
            labels = np.array([inst.class_id for inst in batch])
            with recording():
                if mode == "linear":
                    with no_grad():
                        featlist = _probe_features(model, videos, crop_plan, rng)
                    featlist = [Tensor(f.data) for f in featlist]
                else:
                    featlist = _probe_features(model, videos, crop_plan, rng)
                loss = None
                for feats in featlist:
                    logits = nn_linear(feats, head_w, head_b)
                    term = softmax_cross_entropy(logits, labels)
                    loss = term if loss is None else loss + term
                backward(loss)
                opt.step(lr_schedule(schedule, step))
            step += 1
    correct = 0
    for inst in dataset.test:
        with no_grad():
            feat = model.visual(Tensor(inst.video[None]))
            pooled = model.pooled_feature(feat)
            logits = nn_linear(pooled, head_w, head_b).data[0]
        if int(np.argmax(logits)) == inst.class_id:
            correct += 1
    return correct / len(dataset.test)


# ---------------------------------------------------------------------------
# audio-visual heatmap
# ---------------------------------------------------------------------------

def av_heatmap(video, audio, model):
    """Dot product of the audio feature vector with every cell of the
    unpooled video feature map -> (H1, W1, T1) score grid."""
    with no_grad():
        feat = model.visual(Tensor(video)).data  # (D, T1, H1, W1)
        audio_vec = model.audio(Tensor(audio)).data  # (D,)
    if feat.shape[0] != audio_vec.shape[0]:
        raise ShapeError(
            f"feature dim {feat.shape[0]} != audio dim {audio_vec.shape[0]}")
    return np.einsum("dthw,d->hwt", feat, audio_vec)


def write_heatmap_pgm(path, scores):
    """Write an (H1, W1, T1) score grid as a text PGM, time slices tiled
    left to right; scores are min-max scaled to 0..255."""
    h, w, t = scores.shape
    tiled = np.concatenate([scores[:, :, i] for i in range(t)], axis=1)
    lo, hi = tiled.min(), tiled.max()
    if hi > lo:
        img = np.round((tiled - lo) / (hi - lo) * 255).astype(int)
    else:
        img = np.zeros_like(tiled, dtype=int)
    lines = ["P2", f"{w * t} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# crop-cost benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    strategy: str
    k: int
    mean_ms: float
    std_ms: float
    peak_bytes: int
    terms: int  # directed loss terms, for the fairness assertion

    def csv_row(self):
        return f"{self.strategy},{self.k},{self.mean_ms:.3f},{self.std_ms:.3f},{self.peak_bytes}"


def _bench_step(model, videos, strategy, k, crop_size, tau, settings_area, rng):
    """Forward+backward of the within-modal pipeline with k views total."""
    n, _, t, h, w = videos.shape
    t0, h0, w0 = model.visual_cfg.ref_input
    grid = model.visual_cfg.grid

    def input_view():
        crops = []
        for i in range(n):
            tube = sample_crop_tube((t, h, w), settings_area, (0.75, 4.0 / 3.0), t0, rng)
            crops.append(input_crop_resize(videos[i], tube, (h0, w0)))
        return model.visual(Tensor(np.stack(crops)))

    with recording() as record:
        embeddings = []
        if strategy == "feature-crop":
            feats = [input_view(), input_view()]
            embeddings.append(model.embed_view(feats[0]))
            embeddings.append(model.embed_view(feats[1]))
            for j in range(k - 2):
                src = feats[j % 2]
                t0s, y0s, x0s = sample_crop_offsets(grid, crop_size, grid[0], n, rng)
                parts = [
                    src[i : i + 1, :, :, y0s[i] : y0s[i] + crop_size,
                        x0s[i] : x0s[i] + crop_size]
                    for i in range(n)
                ]
                embeddings.append(model.embed_view(concat(parts, axis=0), None, t0s))
        elif strategy == "input-crop":
            for _ in range(k):
                embeddings.append(model.embed_view(input_view()))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        loss = None
        terms = 0
        for z in embeddings[1:]:
            pair = nce_loss(z, embeddings[0], tau) + nce_loss(embeddings[0], z, tau)
            terms += 2
            loss = pair if loss is None else loss + pair
        peak = record.live_bytes()
        backward(loss)
    for p in model.parameters():
        p.zero_grad()
    return peak, terms


def crop_cost_benchmark(model, k_list=(2, 4, 8), strategies=("input-crop", "feature-crop"),
                        repeats=5, batch_size=8, crop_size=6, tau=0.5,
                        area_range=(0.4, 1.0), warmup=2, seed=0, min_ms=1.0):
    """Wall-clock forward+backward per step for each (strategy, k).

    Both strategies emit k views and 2(k-1) directed loss terms; the
    input-crop strategy re-runs the trunk per view, the feature-crop
    strategy runs it twice and slices. Refuses configs whose steps are
    too fast to time reliably."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    if min(k_list) < 2:
        raise ValueError("need k >= 2 (two large views)")
    rng = np.random.default_rng(seed)
    t0, h0, w0 = model.visual_cfg.ref_input
    videos = rng.uniform(size=(batch_size, 3, t0, h0, w0))
    rows = []
    for strategy in strategies:
        for k in k_list:
            for _ in range(warmup):
                _bench_step(model, videos, strategy, k, crop_size, tau, area_range, rng)
            times = []
            peak = 0
            terms = 0
            for _ in range(repeats):
                start = time.perf_counter()
                p, terms = _bench_step(model, videos, strategy, k, crop_size, tau,
                                       area_range, rng)
                times.append((time.perf_counter() - start) * 1e3)
                peak = max(peak, p)
            mean = float(np.mean(times))
            if mean < min_ms:
                raise BenchmarkError(
                    f"mean step time {mean:.3f} ms below {min_ms} ms; increase "
                    f"batch size or encoder width for trustworthy timings")
            rows.append(BenchRow(strategy, int(k), mean, float(np.std(times)),
                                 int(peak), terms))
    return rows


def append_results_csv(path, rows):
    """Append (metric, k_or_mode, value) rows, writing the header if new."""
    import os

    fresh = not os.path.exists(path)
    with open(path, "a") as f:
        if fresh:
            f.write(RESULTS_HEADER + "\n")
        for metric, key, value in rows:
            f.write(f"{metric},{key},{value!r}\n")
