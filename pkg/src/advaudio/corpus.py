"""Synthetic spoken-command corpus: generation, manifests, split handling.

Each class is a fixed chord template (three sinusoids with class-specific
frequencies under a slow amplitude envelope); per-clip randomness covers
phase, +/-5% frequency jitter, amplitude jitter, and 30 dB additive noise.
Clips are 1 second at 16 kHz with peak <= 0.9 so small additive
perturbations can never clip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, load_wav, save_wav, scale_noise_to_snr

SAMPLE_RATE = 16000
CLIP_SECONDS = 1.0
NOISE_SNR_DB = 30.0
PEAK_CEILING = 0.9

# Ordered class vocabulary; index positions are stable across runs and
# "open_the_door" is the reserved target class for targeted attacks.
VOCAB = (
    "open_the_door",
    "close_the_door",
    "lights_on",
    "lights_off",
    "play_music",
    "stop_music",
    "volume_up",
    "volume_down",
    "yes",
    "no",
)
TARGET_LABEL = "open_the_door"

SPLITS = ("train", "dev", "eval")

# Chord recipe per class: fundamentals spaced ~9% apart so the +/-5%
# per-clip jitter makes neighboring classes nearly confusable at the edges
# (a trained model keeps honest margins), while the joint pattern of three
# partials stays separable for a nearest-centroid baseline.
PARTIAL_RATIOS = (1.0, 2.47, 4.03)
PARTIAL_AMPS = (1.0, 0.6, 0.35)


def class_fundamental_hz(label_index: int) -> float:
    return 235.0 * 2.0 ** (label_index / 8.0)


def class_envelope_hz(label_index: int) -> float:
    return 2.5 + 0.5 * label_index


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest directory
    label: int
    split: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    seed: int
    root: Path

    def by_split(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def __len__(self) -> int:
        return len(self.entries)


def synthesize_clip(seed: int, label_index: int, clip_index: int) -> AudioClip:
    """Render one corpus clip; fully determined by (seed, label, clip index)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(label_index, clip_index)))
    n = int(SAMPLE_RATE * CLIP_SECONDS)
    t = np.arange(n) / SAMPLE_RATE
    f0 = class_fundamental_hz(label_index)
    chord = np.zeros(n)
    for ratio, amp in zip(PARTIAL_RATIOS, PARTIAL_AMPS):
        freq = f0 * ratio * (1.0 + rng.uniform(-0.05, 0.05))
        level = amp * rng.uniform(0.75, 1.25)
        chord += level * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    envelope_hz = class_envelope_hz(label_index) * rng.uniform(0.8, 1.2)
    envelope = 0.6 + 0.4 * np.sin(2.0 * np.pi * envelope_hz * t + rng.uniform(0.0, 2.0 * np.pi))
    signal = envelope * chord
    amplitude = 0.8 * rng.uniform(0.75, 1.0)
    signal *= amplitude / np.max(np.abs(signal))
    clip = AudioClip(signal, SAMPLE_RATE)
    noise = scale_noise_to_snr(clip, rng.standard_normal(n), NOISE_SNR_DB)
    samples = signal + noise
    peak = np.max(np.abs(samples))
    if peak > PEAK_CEILING:
        samples *= PEAK_CEILING / peak
    return AudioClip(samples, SAMPLE_RATE, id=f"{VOCAB[label_index]}/{clip_index:04d}")


def split_counts(per_class: int) -> tuple[int, int, int]:
    """80/10/10 per-class split sizes (train gets the floor, eval the remainder)."""
    n_train = int(per_class * 0.8)
    n_dev = int(per_class * 0.1)
    return n_train, n_dev, per_class - n_train - n_dev


def generate_corpus(seed: int, per_class: int, out_dir) -> Manifest:
    """Emit the full corpus plus manifest under out_dir; deterministic in seed."""
    if per_class < 10:
        raise ValueError(f"per_class must be >= 10, got {per_class}")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    n_train, n_dev, _ = split_counts(per_class)
    entries = []
    for label_index, label in enumerate(VOCAB):
        (root / label).mkdir(exist_ok=True)
        for clip_index in range(per_class):
            clip = synthesize_clip(seed, label_index, clip_index)
            rel = f"{label}/{clip_index:04d}.wav"
            save_wav(clip, root / rel)
            if clip_index < n_train:
                split = "train"
            elif clip_index < n_train + n_dev:
                split = "dev"
            else:
                split = "eval"
            entries.append(ManifestEntry(path=rel, label=label_index, split=split))
    manifest = Manifest(entries=tuple(entries), seed=seed, root=root)
    with open(root / "manifest.jsonl", "w") as fh:
        for entry in entries:
            fh.write(
                json.dumps(
                    {"path": entry.path, "label": VOCAB[entry.label], "split": entry.split}
                )
                + "\n"
            )
    with open(root / "corpus_meta.json", "w") as fh:
        json.dump({"seed": seed, "per_class": per_class, "sample_rate": SAMPLE_RATE}, fh)
        fh.write("\n")
    return manifest


def load_manifest(path) -> Manifest:
    """Parse and validate a JSON-lines manifest (fields: path, label, split)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    root = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
            if not isinstance(record, dict) or not {"path", "label", "split"} <= record.keys():
                raise ValueError(f"{path}:{lineno}: missing path/label/split fields")
            label = record["label"]
            if label not in VOCAB:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            split = record["split"]
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            if not (root / record["path"]).exists():
                raise ValueError(f"{path}:{lineno}: missing file {record['path']!r}")
            entries.append(
                ManifestEntry(path=record["path"], label=VOCAB.index(label), split=split)
            )
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    seed = 0
    meta_path = root / "corpus_meta.json"
    if meta_path.exists():
        with open(meta_path) as fh:
            seed = int(json.load(fh).get("seed", 0))
    return Manifest(entries=tuple(entries), seed=seed, root=root)


def load_split(manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Load a split as (waveforms [N x n], labels [N], clip ids)."""
    entries = manifest.by_split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    waves = np.empty((len(entries), int(SAMPLE_RATE * CLIP_SECONDS)))
    labels = np.empty(len(entries), dtype=np.int64)
    ids = []
    for i, entry in enumerate(entries):
        clip = load_wav(manifest.resolve(entry))
        if len(clip) != waves.shape[1] or clip.sample_rate != SAMPLE_RATE:
            raise ValueError(f"{entry.path}: expected 1 s at {SAMPLE_RATE} Hz")
        waves[i] = clip.samples
        labels[i] = entry.label
        ids.append(entry.path)
    return waves, labels, ids


def load_clips(manifest: Manifest, split: str) -> list[tuple[AudioClip, int]]:
    """Load a split as (AudioClip, label) pairs with manifest-relative ids."""
    waves, labels, ids = load_split(manifest, split)
    return [
        (AudioClip(waves[i], SAMPLE_RATE, id=ids[i]), int(labels[i])) for i in range(len(ids))
    ]
