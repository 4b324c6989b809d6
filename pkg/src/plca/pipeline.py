"""Video-level orchestration: normalize, extract five-frame clips, find the
bright-band ROI, encode each cropped clip, classify, and vote.

Label convention, fixed across the codebase and the CSV: 0 = no movement
(condition positive), 1 = movement (condition negative).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import classifier as clf_mod
from ._interp import resize_bilinear
from .classifier import ClassifierParams, sigmoid
from .dictionary import Dictionary
from .errors import PlcaError, ShapeError
from .lca import LcaConfig, lca_encode

__all__ = [
    "VideoTensor",
    "BoundingBox",
    "ClipPrediction",
    "VideoPrediction",
    "PipelineConfig",
    "EvalReport",
    "normalize",
    "extract_clips",
    "detect_roi",
    "crop_clip",
    "vote",
    "classify_video",
    "evaluate",
    "prepare_clips",
    "prepare_labeled_maps",
]

CLIP_LEN = 5


@dataclass
class VideoTensor:
    """Grayscale video volume [T, H, W] with light metadata."""

    frames: np.ndarray
    frame_rate: float = 20.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)


@dataclass
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ShapeError(f"box extent must be positive, got w={self.w} h={self.h}")

    def check_inside(self, frame_h: int, frame_w: int):
        if self.x < 0 or self.y < 0 or self.x + self.w > frame_w \
                or self.y + self.h > frame_h:
            raise ShapeError(
                f"box (x={self.x}, y={self.y}, w={self.w}, h={self.h}) outside "
                f"frame {frame_h}x{frame_w}")


@dataclass
class ClipPrediction:
    clip_index: int
    center_frame: int
    box: BoundingBox
    logit: float
    probability: float
    label: int


@dataclass
class VideoPrediction:
    source_id: str
    label: int
    mean_probability: float
    clip_predictions: list
    tie_broken: bool


@dataclass
class PipelineConfig:
    """Inference-time settings; LCA defaults here are the fast profile
    (spatial stride 2, 150 inner steps) rather than the training profile."""

    num_clips: int = 4
    crop_h: int = 100
    crop_w: int = 200
    roi_band_height: int = 12
    roi_box_height: int = 40
    roi_smooth: int = 5
    lca: LcaConfig = field(default_factory=lambda: LcaConfig(
        inner_steps=150, strides=(1, 2, 2)))
    threads: int = 1


def normalize(video) -> VideoTensor:
    """Grayscale (mean of channels) and shift intensities to global mean zero."""
    vt = video if isinstance(video, VideoTensor) else VideoTensor(frames=video)
    frames = np.asarray(vt.frames)
    if frames.size == 0:
        raise ValueError("empty video")
    if frames.ndim == 4:
        frames = frames.mean(axis=3, dtype=frames.dtype)
    if frames.ndim != 3:
        raise ShapeError(f"video must be [T, H, W] or [T, H, W, C], got {frames.shape}")
    frames = frames - frames.mean(dtype=np.float64).astype(frames.dtype)
    return VideoTensor(frames=frames, frame_rate=vt.frame_rate, source_id=vt.source_id)


def extract_clips(frames: np.ndarray, num_clips: int):
    """Evenly spaced five-frame clips: centers span [2, T-3], duplicates dropped.

    Returns a list of (center_frame, clip[5, H, W]) pairs.
    """
    frames = np.asarray(frames)
    t = frames.shape[0]
    if t < CLIP_LEN:
        raise ShapeError(f"video too short: {t} frames, need >= {CLIP_LEN}")
    if num_clips < 1:
        raise ValueError(f"num_clips must be >= 1, got {num_clips}")
    centers = np.unique(np.rint(np.linspace(2, t - 3, num_clips)).astype(int))
    return [(int(c), frames[c - 2:c + 3]) for c in centers]


def detect_roi(frame: np.ndarray, band_height: int = 12, box_height: int = 40,
               smooth: int = 5) -> BoundingBox:
    """Brightness-band peak detector standing in for a learned ROI model.

    Scores each horizontal band of `band_height` rows by mean intensity,
    smooths the profile with a moving average, and returns a full-width box
    of `box_height` rows centered on the best band (clamped to the frame).
    Confidence is the normalized contrast of the profile; a constant frame
    yields the center box with confidence 0.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ShapeError(f"frame must be 2-d, got {frame.shape}")
    h, w = frame.shape
    band_height = min(band_height, h)
    box_h = min(box_height, h)

    row_means = frame.mean(axis=1, dtype=np.float64)
    band = np.convolve(row_means, np.ones(band_height) / band_height, mode="valid")
    if smooth > 1 and band.size > 1:
        # edge-replicated padding keeps a constant profile exactly constant
        left = smooth // 2
        right = smooth - 1 - left
        padded = np.pad(band, (left, right), mode="edge")
        band = np.convolve(padded, np.ones(smooth) / smooth, mode="valid")
    lo, hi = float(band.min()), float(band.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        center_row = h // 2
        confidence = 0.0
    else:
        center_row = int(np.argmax(band)) + band_height // 2
        confidence = float((hi - band.mean()) / (hi - lo))
    y = int(np.clip(center_row - box_h // 2, 0, h - box_h))
    return BoundingBox(x=0, y=y, w=w, h=box_h,
                       confidence=float(np.clip(confidence, 0.0, 1.0)))


def crop_clip(clip: np.ndarray, box: BoundingBox, target_h: int = 100,
              target_w: int = 200) -> np.ndarray:
    """Apply one box to all frames of a clip, then bilinear-resize each frame."""
    clip = np.asarray(clip)
    if clip.ndim != 3:
        raise ShapeError(f"clip must be [T, H, W], got {clip.shape}")
    box.check_inside(clip.shape[1], clip.shape[2])
    window = clip[:, box.y:box.y + box.h, box.x:box.x + box.w]
    if box.h == target_h and box.w == target_w:
        return np.ascontiguousarray(window)
    return np.stack([resize_bilinear(fr, target_h, target_w) for fr in window])


def vote(labels, probabilities):
    """Video label from clip labels: mode, with probability-average tie-break.

    On a tie the mean clip probability is rounded to the nearest label;
    exactly 0.5 resolves to label 1 (movement). Returns (label, tie_broken).
    """
    labels = list(labels)
    if not labels:
        raise ValueError("no clip labels to vote on")
    ones = sum(1 for l in labels if l == 1)
    zeros = len(labels) - ones
    if ones != zeros:
        return (1 if ones > zeros else 0), False
    mean_p = float(np.mean(list(probabilities)))
    return (1 if mean_p >= 0.5 else 0), True


def _predict_clip(idx, center, clip, box, dictionary, params, config):
    cropped = crop_clip(clip, box, config.crop_h, config.crop_w)
    amap = lca_encode(cropped, dictionary.filters, config.lca)
    logit = clf_mod.forward(amap, params, mode="eval")
    prob = float(sigmoid(logit))
    return ClipPrediction(clip_index=idx, center_frame=center, box=box,
                          logit=float(logit), probability=prob,
                          label=1 if prob >= 0.5 else 0)


def classify_video(video, dictionary: Dictionary, params: ClassifierParams,
                   config: PipelineConfig,
                   external_boxes: Optional[dict] = None) -> VideoPrediction:
    """Full per-video pipeline: normalize, clip, ROI, encode, classify, vote.

    `external_boxes` maps center-frame index -> BoundingBox and overrides the
    built-in detector for those frames.
    """
    if params.k_atoms != dictionary.k:
        raise ShapeError(
            f"classifier expects {params.k_atoms} atoms but dictionary has "
            f"{dictionary.k}")
    vt = normalize(video)
    clips = extract_clips(vt.frames, config.num_clips)

    def run(item):
        idx, (center, clip) = item
        try:
            if external_boxes and center in external_boxes:
                box = external_boxes[center]
                box.check_inside(vt.frames.shape[1], vt.frames.shape[2])
            else:
                box = detect_roi(vt.frames[center], config.roi_band_height,
                                 config.roi_box_height, config.roi_smooth)
            return _predict_clip(idx, center, clip, box, dictionary, params, config)
        except PlcaError as exc:
            raise type(exc)(f"clip {idx} (center frame {center}): {exc}") from exc

    items = list(enumerate(clips))
    if config.threads > 1 and len(items) > 1:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                preds = list(pool.map(run, items))
    else:
        preds = [run(item) for item in items]

    label, tie_broken = vote([p.label for p in preds],
                             [p.probability for p in preds])
    return VideoPrediction(
        source_id=vt.source_id,
        label=label,
        mean_probability=float(np.mean([p.probability for p in preds])),
        clip_predictions=preds,
        tie_broken=tie_broken,
    )


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # [true 0/1, predicted 0/1]
    records: list


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def macro_f1_from_confusion(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1; an absent class scores 0 with a warning."""
    f1s = []
    for cls in (0, 1):
        tp = confusion[cls, cls]
        fp = confusion[1 - cls, cls]
        fn = confusion[cls, 1 - cls]
        if tp + fn == 0:
            warnings.warn(f"class {cls} absent from evaluation set; its F1 "
                          "is defined as 0")
        f1s.append(_f1(tp, fp, fn))
    return float(np.mean(f1s))


def evaluate(entries, dictionary: Dictionary, params: ClassifierParams,
             config: PipelineConfig, load_video) -> EvalReport:
    """Classify every manifest entry and report accuracy / macro F1 / confusion.

    `entries` carry (path, label, group_id, optional boxes); `load_video`
    maps an entry to a VideoTensor.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("empty evaluation manifest")

    def run(entry):
        video = load_video(entry)
        boxes = None
        if getattr(entry, "boxes", None):
            boxes = {f: BoundingBox(*xywh) for f, xywh in entry.boxes.items()}
        return classify_video(video, dictionary, params, config,
                              external_boxes=boxes)

    if config.threads > 1 and len(entries) > 1:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                preds = list(pool.map(run, entries))
    else:
        preds = [run(e) for e in entries]

    confusion = np.zeros((2, 2), dtype=np.int64)
    records = []
    for entry, pred in zip(entries, preds):
        confusion[entry.label, pred.label] += 1
        records.append({
            "source_id": pred.source_id or entry.path,
            "group_id": entry.group_id,
            "label": int(entry.label),
            "predicted": int(pred.label),
            "mean_probability": pred.mean_probability,
            "tie_broken": pred.tie_broken,
        })
    accuracy = float(np.trace(confusion)) / len(entries)
    return EvalReport(accuracy=accuracy,
                      macro_f1=macro_f1_from_confusion(confusion),
                      confusion=confusion, records=records)


def prepare_clips(video: VideoTensor, config: PipelineConfig,
                  clips_per_video: int, external_boxes: Optional[dict] = None):
    """Normalized, ROI-cropped clips from one video (shared by both trainers)."""
    vt = normalize(video)
    out = []
    for center, clip in extract_clips(vt.frames, clips_per_video):
        if external_boxes and center in external_boxes:
            box = external_boxes[center]
            box.check_inside(vt.frames.shape[1], vt.frames.shape[2])
        else:
            box = detect_roi(vt.frames[center], config.roi_band_height,
                             config.roi_box_height, config.roi_smooth)
        out.append(crop_clip(clip, box, config.crop_h, config.crop_w))
    return out


def prepare_labeled_maps(labeled_clips, dictionary: Dictionary,
                         lca_config: LcaConfig, augment: bool,
                         augment_copies: int, seed: int, threads: int = 1):
    """Encode (clip, label) pairs, optionally adding augmented variants.

    Augmentation happens on clips before encoding; each variant is encoded
    once, so the classifier trains on a fixed expanded set of maps.
    """
    tasks = []
    ss = np.random.SeedSequence(seed)
    for idx, (clip, label) in enumerate(labeled_clips):
        tasks.append((clip, label))
        if augment and augment_copies > 0:
            child_rngs = [np.random.default_rng(s)
                          for s in ss.spawn(augment_copies)]
            for rng in child_rngs:
                tasks.append((clf_mod.augment_clip(clip, rng), label))

    def encode(task):
        clip, label = task
        return lca_encode(clip, dictionary.filters, lca_config), label

    if threads > 1 and len(tasks) > 1:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            with ThreadPoolExecutor(max_workers=threads) as pool:
                pairs = list(pool.map(encode, tasks))
    else:
        pairs = [encode(t) for t in tasks]
    return [(amap, label) for amap, label in pairs]
