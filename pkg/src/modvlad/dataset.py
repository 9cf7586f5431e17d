"""Synthetic frame-feature corpus with planted segment concepts, plus its file formats.

Binary corpus layout (little-endian)::

    "MODC" | version u16 | class_count u32 | N_v u32 | N_a u32 | record_count u64
    per record:
        id_len u32 | video_id utf-8 | M u32
        visual M*N_v f32 | audio M*N_a f32
        label_count u16 | label ids u32 * label_count

Segment labels live next to it as CSV ``video_id,start_frame,class_id,positive``.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MODC"
VERSION = 1
SEGMENT_LEN = 5

_HEADER = struct.Struct("<4sHIIIQ")


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")


class VersionError(FormatError):
    pass


@dataclass(eq=False)
class FrameFeatureRecord:
    video_id: str
    visual: np.ndarray
    audio: np.ndarray
    video_labels: tuple = ()

    def __post_init__(self):
        self.visual = np.ascontiguousarray(self.visual, dtype=np.float32)
        self.audio = np.ascontiguousarray(self.audio, dtype=np.float32)
        self.video_labels = tuple(int(c) for c in self.video_labels)
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise ValueError("visual and audio must be 2-D frame matrices")
        if self.visual.shape[0] != self.audio.shape[0] or self.visual.shape[0] < 1:
            raise ValueError(
                f"{self.video_id}: visual has {self.visual.shape[0]} frames, audio {self.audio.shape[0]}"
            )

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameFeatureRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.video_labels == other.video_labels
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.audio, other.audio)
        )


@dataclass(frozen=True)
class SegmentLabel:
    video_id: str
    start_frame: int
    class_id: int
    positive: bool


@dataclass
class CorpusSpec:
    num_videos: int = 200
    class_count: int = 10
    frames_range: tuple = (20, 40)
    n_visual: int = 64
    n_audio: int = 8
    noise_rate: float = 0.1
    signature_strength: float = 0.5
    seed: int = 0
    split: tuple = (0.7, 0.2, 0.1)
    classes_per_video: tuple = (1, 3)
    windows_per_class: tuple = (1, 2)
    frame_noise: float = 1.0
    scene_scale: float = 0.5
    # weak video-wide cue for every planted class, present in all frames
    context_strength: float = 0.0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("noise_rate must lie in [0, 1)")
        lo, hi = self.frames_range
        if lo < SEGMENT_LEN or hi < lo:
            raise ConfigError(f"frames_range must satisfy {SEGMENT_LEN} <= min <= max, got {self.frames_range}")
        if self.num_videos < 3:
            raise ConfigError("num_videos must be >= 3 (one per split)")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split must be three positive fractions summing to 1")
        if self.n_visual < 1 or self.n_audio < 1:
            raise ConfigError("feature dims must be positive")
        if min(self.signature_strength, self.frame_noise, self.scene_scale, self.context_strength) < 0:
            raise ConfigError("strength and noise scales must be non-negative")
        if self.classes_per_video[0] < 1 or self.windows_per_class[0] < 1:
            raise ConfigError("each video needs at least one planted class and window")


@dataclass
class Split:
    records: list
    segments: list = field(default_factory=list)


@dataclass
class Corpus:
    spec: CorpusSpec
    train: Split
    finetune: Split
    eval: Split
    signatures_visual: np.ndarray = None
    signatures_audio: np.ndarray = None
    # video_id -> {start_frame: class_id}
    planted: dict = field(default_factory=dict)


def _signatures(rng, class_count: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((class_count, dim))
    if class_count <= dim:
        q, _ = np.linalg.qr(raw.T)
        rows = q.T[:class_count]
    else:
        rows = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return rows * np.sqrt(dim)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build train / finetune / eval splits with planted 5-frame concepts.

    Each class owns a signature direction in visual and audio space. A planted
    (video, window, class) triple adds ``signature_strength * signature`` to
    every frame of an aligned 5-frame window. Video labels are the planted
    classes, corrupted by ``noise_rate``; segment labels are exact.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.class_count
    sig_v = _signatures(rng, C, spec.n_visual)
    sig_a = _signatures(rng, C, spec.n_audio)

    records, planted_all = [], {}
    for n in range(spec.num_videos):
        vid = f"v{n:06d}"
        M = int(rng.integers(spec.frames_range[0], spec.frames_range[1] + 1))
        n_windows = M // SEGMENT_LEN
        k = int(rng.integers(spec.classes_per_video[0], spec.classes_per_video[1] + 1))
        k = min(k, n_windows)
        classes = rng.choice(C, size=k, replace=False)
        free = list(rng.permutation(n_windows))
        # one window per class first, so every planted class is present
        planted = {int(free.pop()) * SEGMENT_LEN: int(c) for c in classes}
        for c in classes:
            extra = int(rng.integers(spec.windows_per_class[0], spec.windows_per_class[1] + 1)) - 1
            for _ in range(min(extra, len(free))):
                planted[int(free.pop()) * SEGMENT_LEN] = int(c)

        scene_v = spec.scene_scale * rng.standard_normal(spec.n_visual)
        scene_a = spec.scene_scale * rng.standard_normal(spec.n_audio)
        for c in set(planted.values()):
            scene_v = scene_v + spec.context_strength * sig_v[c]
            scene_a = scene_a + spec.context_strength * sig_a[c]
        visual = scene_v + spec.frame_noise * rng.standard_normal((M, spec.n_visual))
        audio = scene_a + spec.frame_noise * rng.standard_normal((M, spec.n_audio))
        for start, c in planted.items():
            visual[start:start + SEGMENT_LEN] += spec.signature_strength * sig_v[c]
            audio[start:start + SEGMENT_LEN] += spec.signature_strength * sig_a[c]

        true_labels = sorted(set(planted.values()))
        labels = set()
        for c in true_labels:
            if rng.random() >= spec.noise_rate:
                labels.add(c)
            if rng.random() < spec.noise_rate:
                labels.add(int(rng.integers(C)))
        records.append(FrameFeatureRecord(vid, visual, audio, sorted(labels)))
        planted_all[vid] = planted

    n_train = int(round(spec.split[0] * spec.num_videos))
    n_ft = int(round(spec.split[1] * spec.num_videos))
    n_train = min(max(n_train, 1), spec.num_videos - 2)
    n_ft = min(max(n_ft, 1), spec.num_videos - n_train - 1)
    train = records[:n_train]
    ft = records[n_train:n_train + n_ft]
    ev = records[n_train + n_ft:]
    return Corpus(
        spec=spec,
        train=Split(train),
        finetune=Split(ft, _segment_labels(ft, planted_all)),
        eval=Split(ev, _segment_labels(ev, planted_all)),
        signatures_visual=sig_v,
        signatures_audio=sig_a,
        planted=planted_all,
    )


def _segment_labels(records, planted_all) -> list:
    rows = []
    for rec in records:
        planted = planted_all[rec.video_id]
        classes = sorted(set(planted.values()) | set(rec.video_labels))
        for start in range(0, rec.num_frames - SEGMENT_LEN + 1, SEGMENT_LEN):
            for c in classes:
                rows.append(SegmentLabel(rec.video_id, start, c, planted.get(start) == c))
    return rows


def segment_windows(record: FrameFeatureRecord, stride: int = SEGMENT_LEN) -> list:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    M = record.num_frames
    return [
        (s, record.visual[s:s + SEGMENT_LEN], record.audio[s:s + SEGMENT_LEN])
        for s in range(0, M - SEGMENT_LEN + 1, stride)
    ]


# -- binary corpus files ------------------------------------------------------

@dataclass
class RecordSet:
    class_count: int
    n_visual: int
    n_audio: int
    records: list

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def encode_corpus(records, class_count: int, n_visual: int | None = None,
                  n_audio: int | None = None) -> bytes:
    records = list(records)
    if records:
        n_visual = records[0].visual.shape[1] if n_visual is None else n_visual
        n_audio = records[0].audio.shape[1] if n_audio is None else n_audio
    if n_visual is None or n_audio is None:
        raise ConfigError("feature dims are required to write an empty corpus")
    parts = [_HEADER.pack(MAGIC, VERSION, class_count, n_visual, n_audio, len(records))]
    for rec in records:
        if rec.visual.shape[1] != n_visual or rec.audio.shape[1] != n_audio:
            raise ValueError(f"{rec.video_id}: feature dims differ from corpus header")
        if any(not 0 <= c < class_count for c in rec.video_labels):
            raise ValueError(f"{rec.video_id}: label id out of range for {class_count} classes")
        vid = rec.video_id.encode("utf-8")
        parts.append(struct.pack("<I", len(vid)))
        parts.append(vid)
        parts.append(struct.pack("<I", rec.num_frames))
        parts.append(rec.visual.astype("<f4").tobytes())
        parts.append(rec.audio.astype("<f4").tobytes())
        parts.append(struct.pack("<H", len(rec.video_labels)))
        parts.append(np.asarray(rec.video_labels, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_corpus(buf: bytes) -> RecordSet:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated corpus header", len(buf))
    magic, version, C, nv, na, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise VersionError(f"unsupported corpus version {version} (reader supports {VERSION})", 4)

    off = _HEADER.size

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated corpus: need {n} bytes", off)
        chunk = buf[off:off + n]
        off += n
        return chunk

    records = []
    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        try:
            vid = take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("video_id is not valid UTF-8", off - id_len) from exc
        (M,) = struct.unpack("<I", take(4))
        if M < 1:
            raise FormatError(f"record {vid} has zero frames", off - 4)
        visual = np.frombuffer(take(4 * M * nv), dtype="<f4").reshape(M, nv).astype(np.float32)
        audio = np.frombuffer(take(4 * M * na), dtype="<f4").reshape(M, na).astype(np.float32)
        (n_labels,) = struct.unpack("<H", take(2))
        label_off = off
        labels = np.frombuffer(take(4 * n_labels), dtype="<u4").tolist()
        if any(c >= C for c in labels):
            raise FormatError(f"record {vid} has label id >= class_count {C}", label_off)
        records.append(FrameFeatureRecord(vid, visual, audio, labels))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last record", off)
    return RecordSet(C, nv, na, records)


def write_corpus(path, records, class_count: int, n_visual: int | None = None,
                 n_audio: int | None = None) -> None:
    Path(path).write_bytes(encode_corpus(records, class_count, n_visual, n_audio))


def read_corpus(path) -> RecordSet:
    return decode_corpus(Path(path).read_bytes())


def write_segment_labels(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "start_frame", "class_id", "positive"])
        for r in rows:
            w.writerow([r.video_id, r.start_frame, r.class_id, int(r.positive)])


def read_segment_labels(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "start_frame", "class_id", "positive"]:
            raise FormatError(f"unexpected segment label header {reader.fieldnames}")
        for r in reader:
            rows.append(SegmentLabel(r["video_id"], int(r["start_frame"]), int(r["class_id"]),
                                     r["positive"] in ("1", "true", "True")))
    return rows


SPLIT_FILES = {
    "train": ("train.modc", None),
    "finetune": ("finetune.modc", "finetune_segments.csv"),
    "eval": ("eval.modc", "eval_segments.csv"),
}


def save_corpus_dir(out, corpus: Corpus) -> list:
    """Write all three splits plus ``corpus.json``; returns the written paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = corpus.spec
    written = []
    for name, (rec_file, seg_file) in SPLIT_FILES.items():
        split = getattr(corpus, name)
        write_corpus(out / rec_file, split.records, spec.class_count, spec.n_visual, spec.n_audio)
        written.append(out / rec_file)
        if seg_file:
            write_segment_labels(out / seg_file, split.segments)
            written.append(out / seg_file)
    meta = {"spec": asdict(spec)}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(out / "corpus.json")
    return written


def load_split(directory, name: str) -> Split:
    directory = Path(directory)
    rec_file, seg_file = SPLIT_FILES[name]
    records = read_corpus(directory / rec_file).records
    segments = read_segment_labels(directory / seg_file) if seg_file else []
    return Split(records, segments)


def corpus_class_count(directory) -> int:
    with open(Path(directory) / SPLIT_FILES["train"][0], "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError("truncated corpus header", len(head))
    return _HEADER.unpack(head)[2]
