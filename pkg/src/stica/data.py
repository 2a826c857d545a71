"""Synthetic paired audio-visual instances with controllable structure.

Each clip shows a Gaussian blob carrying an oriented grating; over the
clip the blob translates along a pair-specific axis while the grating
orientation rotates, and both complete exactly one cycle, so the latent
state evolves on a ring of period T. The instance phase is a shift along
that ring, which makes two same-class instances exact circular time
shifts of one another.

Classes come in reversed pairs: class 2k plays the cycle forward and
class 2k+1 is its exact time-reversal (video frames and audio columns
flipped). Every frame of a clip therefore also appears in clips of the
partner class, so any order-blind temporal pooling is provably blind
within a pair, while order-aware pooling separates all classes.

The audio spectrogram holds a burst whose frequency band identifies the
class pair and whose column position is locked to the phase, so class
and instance identity are decodable from either modality alone.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AVInstance",
    "SyntheticDatasetSpec",
    "Dataset",
    "generate_instance",
    "build_dataset",
    "iterate_batches",
    "anti_class",
    "blob_center",
]


@dataclass
class AVInstance:
    video: np.ndarray  # (3, T, H, W) in [0, 1]
    audio: np.ndarray  # (1, F, T_a)
    class_id: int
    instance_id: int
    phase: int  # latent, evaluation only


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 4
    per_class: int = 50
    frames: int = 8
    height: int = 56
    width: int = 56
    freq_bins: int = 32
    audio_frames: int = 32
    noise: float = 0.05
    seed: int = 0
    phase_range: int = 4
    blob_sigma: float = 9.0
    amplitude: float = 0.9

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes % 2:
            raise ValueError("num_classes must be even and >= 2 (reversed pairs)")
        if not 1 <= self.phase_range <= self.frames:
            raise ValueError("phase_range must lie in [1, frames] (phase shifts time)")
        if self.audio_frames % self.frames:
            raise ValueError("audio_frames must be a multiple of frames "
                             "(audio phase is locked to the video cycle)")
        if not 0.0 <= self.noise <= 1.0 - self.amplitude:
            raise ValueError("noise level must keep pixels inside [0, 1]")

    @property
    def num_pairs(self):
        return self.num_classes // 2


def anti_class(class_id):
    """The time-reversal partner class."""
    return class_id + 1 if class_id % 2 == 0 else class_id - 1


def _toroidal_gaussian(extent, center, sigma):
    xs = np.arange(extent, dtype=np.float64)
    d = np.abs(xs - center)
    d = np.minimum(d, extent - d)
    return np.exp(-0.5 * (d / sigma) ** 2)


def _pair_traits(spec, pair):
    """(horizontal motion?, grating wavelength in pixels) for a class pair."""
    horizontal = pair % 2 == 0
    wavelength = 8.0 / (1 + pair // 2)
    return horizontal, max(wavelength, 3.0)


def blob_center(spec, class_id, phase, t):
    """Latent blob position (y, x) at frame t; ground truth for evaluation."""
    pair = class_id // 2
    horizontal, _ = _pair_traits(spec, pair)
    if class_id % 2:  # reversed partner plays the forward frames backwards
        t = spec.frames - 1 - t
    state = (phase + t) % spec.frames
    if horizontal:
        return (spec.height // 2, (spec.width // spec.frames) * state)
    return ((spec.height // spec.frames) * state, spec.width // 2)


def _render_frame(spec, pair, state):
    """Blob with an oriented grating at ring position `state`."""
    h, w, t_len = spec.height, spec.width, spec.frames
    horizontal, wavelength = _pair_traits(spec, pair)
    if horizontal:
        yc, xc = h // 2, (w // t_len) * state
    else:
        yc, xc = (h // t_len) * state, w // 2
    # signed toroidal offsets from the blob center
    dy = (np.arange(h) - yc + h / 2.0) % h - h / 2.0
    dx = (np.arange(w) - xc + w / 2.0) % w - w / 2.0
    env = np.outer(np.exp(-0.5 * (dy / spec.blob_sigma) ** 2),
                   np.exp(-0.5 * (dx / spec.blob_sigma) ** 2))
    theta = np.pi * state / t_len
    arg = (2.0 * np.pi / wavelength) * (np.cos(theta) * dx[None, :]
                                        + np.sin(theta) * dy[:, None])
    grating = 0.5 + 0.5 * np.cos(arg)
    return env * grating


def _render_forward_video(spec, pair, phase):
    frames = np.stack([
        _render_frame(spec, pair, (phase + t) % spec.frames)
        for t in range(spec.frames)
    ])
    channel_scale = np.array([1.0, 0.8, 0.6]).reshape(3, 1, 1, 1)
    return spec.amplitude * channel_scale * frames[None, :, :, :]


def _render_forward_audio(spec, pair, phase):
    f, ta = spec.freq_bins, spec.audio_frames
    band_center = f * (2 * pair + 1) / (2 * spec.num_pairs)
    band = _toroidal_gaussian(f, band_center, 2.0)
    burst = _toroidal_gaussian(ta, phase * (ta // spec.frames), 2.0)
    return spec.amplitude * np.outer(band, burst)[None, :, :]


def generate_instance(spec, class_id, rng, instance_id=-1):
    """Render one instance; reversed-pair classes flip time in both modalities."""
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {spec.num_classes})")
    phase = int(rng.integers(0, spec.phase_range))
    pair = class_id // 2
    video = _render_forward_video(spec, pair, phase)
    audio = _render_forward_audio(spec, pair, phase)
    if class_id % 2:
        video = video[:, ::-1].copy()
        audio = audio[:, :, ::-1].copy()
    if spec.noise > 0:
        video = video + spec.noise * rng.uniform(0.0, 1.0, size=video.shape)
        audio = audio + spec.noise * rng.uniform(0.0, 1.0, size=audio.shape)
    video = np.clip(video, 0.0, 1.0)
    audio = np.clip(audio, 0.0, 1.0)
    return AVInstance(video, audio, class_id, instance_id, phase)


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    train: list
    test: list

    def __len__(self):
        return len(self.train) + len(self.test)


def build_dataset(spec):
    """Deterministic, class-balanced 80/20 split keyed on the instance id."""
    train, test = [], []
    total = spec.num_classes * spec.per_class
    for instance_id in range(total):
        class_id = instance_id % spec.num_classes
        rng = np.random.default_rng([spec.seed, instance_id])
        inst = generate_instance(spec, class_id, rng, instance_id)
        (test if instance_id % 5 == 4 else train).append(inst)
    return Dataset(spec, train, test)


def iterate_batches(instances, batch_size, rng):
    """One shuffled epoch of batches; a trailing partial batch is dropped."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if batch_size > len(instances):
        raise ValueError(f"batch size {batch_size} > dataset size {len(instances)}")
    order = rng.permutation(len(instances))
    for start in range(0, len(instances) - batch_size + 1, batch_size):
        yield [instances[i] for i in order[start : start + batch_size]]
