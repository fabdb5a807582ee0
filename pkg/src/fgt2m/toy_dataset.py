"""Procedural caption/motion pairs.

Every fine-grained word in a caption controls one measurable statistic of
the 8-channel motion:

    0 root forward velocity   sign follows forward/backward
    1 lateral velocity        level codes the second action (then/while)
    2 left-arm elevation      raised arm follows left/right
    3 right-arm elevation
    4 vertical displacement   bounces while jumping
    5 heading rate            sign follows the turn side
    6 phase sinusoid          amplitude depends on the main action
    7 step-count envelope     one bump per repetition

With ``then`` the main action fills the first half and the second action the
second half; with ``while`` both span the whole clip.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .ling_graph import DependencyParse, RelationVocab, load_conllu
from .text_frontend import (ACTIONS, COUNT_WORDS, GERUND, VERB_3S, ToyGrammar, tokenize)

DIRECTIONS = ("forward", "backward", "none")
SIDES = ("left", "right", "none")
CONNECTIVES = ("while", "then", "none")
SIDED_ACTIONS = ("wave", "turn")
LOCOMOTION = ("walk", "jump")
N_CHANNELS = 8
JITTER = 0.05

_DIR_SIGN = {"forward": 1.0, "backward": -1.0, "none": 0.0}
_PHASE_AMP = {"walk": 1.0, "jump": 0.5, "wave": 0.3, "turn": 0.6}
_SECOND_CODE = {"walk": 0.4, "wave": 0.8, "jump": 1.2, "turn": 1.6}
_ARM_REST = 0.1


@dataclass(frozen=True)
class ToyMotionSpec:
    action: str
    direction: str = "none"
    side: str = "none"
    count: int = 1
    connective: str = "none"
    second_action: str | None = None

    def validate(self) -> None:
        if self.action not in ACTIONS:
            raise ContractError(f"unknown action {self.action!r}")
        if self.direction not in DIRECTIONS or self.side not in SIDES:
            raise ContractError(f"bad direction/side ({self.direction!r}, {self.side!r})")
        if self.action in SIDED_ACTIONS:
            if self.side == "none" or self.direction != "none":
                raise ContractError(f"{self.action} needs a side and no direction")
        elif self.side != "none":
            raise ContractError(f"side given for unsided action {self.action}")
        if self.count not in (1, 2, 3, 4):
            raise ContractError(f"count must be 1..4, got {self.count}")
        if self.connective not in CONNECTIVES:
            raise ContractError(f"unknown connective {self.connective!r}")
        if (self.connective == "none") != (self.second_action is None):
            raise ContractError("a connective requires a second action and vice versa")
        if self.second_action is not None and self.second_action not in ACTIONS:
            raise ContractError(f"unknown second action {self.second_action!r}")

    def frame(self) -> str:
        if self.action == "wave":
            return "hand"
        if self.action == "turn":
            return "turn"
        return "bare" if self.direction == "none" else "dir"

    def to_bytes(self) -> bytes:
        second = 255 if self.second_action is None else ACTIONS.index(self.second_action)
        return bytes([ACTIONS.index(self.action), DIRECTIONS.index(self.direction),
                      SIDES.index(self.side), self.count, CONNECTIVES.index(self.connective), second])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ToyMotionSpec":
        a, d, s, c, k, sec = raw
        try:
            spec = cls(ACTIONS[a], DIRECTIONS[d], SIDES[s], c, CONNECTIVES[k],
                       None if sec == 255 else ACTIONS[sec])
        except IndexError:
            raise ContractError(f"spec bytes out of range: {list(raw)}") from None
        spec.validate()
        return spec


def render_caption(spec: ToyMotionSpec, grammar: ToyGrammar) -> str:
    spec.validate()
    template = grammar.template_for(spec.frame(), spec.count > 1, spec.connective)
    slots = {"verb": VERB_3S[spec.action], "direction": spec.direction, "side": spec.side}
    if spec.count > 1:
        slots["count"] = COUNT_WORDS[spec.count]
    if spec.second_action is not None:
        slots["verb2"] = VERB_3S[spec.second_action]
        slots["gerund2"] = GERUND[spec.second_action]
    return template.render(slots)


def spec_from_caption(caption: str, grammar: ToyGrammar) -> ToyMotionSpec:
    template, slots = grammar.match(caption)
    action = next(a for a in ACTIONS if VERB_3S[a] == slots["verb"])
    inv_count = {w: c for c, w in COUNT_WORDS.items()}
    second = None
    if "verb2" in slots:
        second = next(a for a in ACTIONS if VERB_3S[a] == slots["verb2"])
    elif "gerund2" in slots:
        second = next(a for a in ACTIONS if GERUND[a] == slots["gerund2"])
    return ToyMotionSpec(action, slots.get("direction", "none"), slots.get("side", "none"),
                         inv_count.get(slots.get("count"), 1), template.connective, second)


def sample_spec(rng: np.random.Generator, grammar: ToyGrammar) -> tuple[ToyMotionSpec, str]:
    """Draw the action uniformly, then each remaining attribute uniformly among its valid values."""
    if not grammar.templates:
        raise ContractError("grammar has no templates")
    action = ACTIONS[rng.integers(len(ACTIONS))]
    if action in SIDED_ACTIONS:
        direction, side = "none", ("left", "right")[rng.integers(2)]
    else:
        direction, side = DIRECTIONS[rng.integers(3)], "none"
    count = int(rng.integers(1, 5))
    connective = CONNECTIVES[rng.integers(3)]
    second = ACTIONS[rng.integers(len(ACTIONS))] if connective != "none" else None
    spec = ToyMotionSpec(action, direction, side, count, connective, second)
    return spec, render_caption(spec, grammar)


def envelope_width(n_frames: int) -> float:
    return min(1.5, n_frames / 40.0)


def synth_motion(spec: ToyMotionSpec, n_frames: int, rng: np.random.Generator | None = None,
                 jitter: float = JITTER) -> np.ndarray:
    """Motion of shape ``(n_frames, 8)`` encoding ``spec``; noiseless when ``rng`` is None."""
    spec.validate()
    if n_frames < 16:
        raise ContractError(f"need at least 16 frames, got {n_frames}")
    m = np.zeros((n_frames, N_CHANNELS))
    half = n_frames // 2
    main = slice(0, half) if spec.connective == "then" else slice(0, n_frames)
    length = main.stop - main.start
    phase = np.arange(length) / length
    seg = m[main]

    seg[:, 2] = seg[:, 3] = _ARM_REST
    arm = 2 if spec.side == "left" else 3
    if spec.action == "walk":
        seg[:, 0] = _DIR_SIGN[spec.direction]
    elif spec.action == "jump":
        seg[:, 0] = 0.5 * _DIR_SIGN[spec.direction]
        seg[:, 4] = 0.8 * np.abs(np.sin(2 * np.pi * phase))
    elif spec.action == "wave":
        seg[:, arm] = 1.0 + 0.2 * np.sin(2 * np.pi * 3 * phase)
    else:
        seg[:, 5] = 1.0 if spec.side == "left" else -1.0
        seg[:, arm] = 0.4
    seg[:, 6] = _PHASE_AMP[spec.action] * np.sin(2 * np.pi * 2 * phase)

    width = envelope_width(n_frames)
    frames = np.arange(length)
    for k in range(spec.count):
        centre = (k + 0.5) * length / spec.count
        seg[:, 7] += np.exp(-0.5 * ((frames - centre) / width) ** 2)

    if spec.second_action is not None:
        second = slice(half, n_frames) if spec.connective == "then" else slice(0, n_frames)
        m[second, 1] += _SECOND_CODE[spec.second_action]

    if rng is not None and jitter > 0:
        m += rng.normal(0.0, jitter, size=m.shape)
    return m.astype(np.float32)


@dataclass
class DatasetRecord:
    caption: str
    parse: DependencyParse
    motion: np.ndarray  # float32 [T, D]
    spec: ToyMotionSpec

    def __eq__(self, other):
        return (isinstance(other, DatasetRecord) and self.caption == other.caption
                and self.parse == other.parse and self.spec == other.spec
                and self.motion.shape == other.motion.shape
                and np.array_equal(self.motion, other.motion))


def make_record(seed_seq: np.random.SeedSequence, n_frames: int, grammar: ToyGrammar) -> DatasetRecord:
    rng = np.random.default_rng(seed_seq)
    spec, caption = sample_spec(rng, grammar)
    template, _ = grammar.match(caption)
    return DatasetRecord(caption, template.parse(tokenize(caption)), synth_motion(spec, n_frames, rng), spec)


def generate_dataset(n_records: int, n_frames: int = 64, seed: int = 0,
                     grammar: ToyGrammar | None = None) -> list[DatasetRecord]:
    grammar = grammar or ToyGrammar.default()
    children = np.random.SeedSequence(seed).spawn(n_records)
    return [make_record(ss, n_frames, grammar) for ss in children]


# --------------------------------------------------------------------------
# binary file format (little endian):
#   magic "FGT2MDS\0", u8 version, u32 count, then per record
#   u32 len + caption utf-8, u32 len + CoNLL-U utf-8, 6 spec bytes,
#   u32 frames, u32 channels, frames*channels float32

MAGIC = b"FGT2MDS\x00"
VERSION = 1


def encode_records(records) -> bytes:
    out = [MAGIC, struct.pack("<BI", VERSION, len(records))]
    for rec in records:
        cap = rec.caption.encode("utf-8")
        conllu = rec.parse.to_conllu().encode("utf-8")
        motion = np.ascontiguousarray(rec.motion, dtype="<f4")
        if motion.ndim != 2:
            raise ContractError("motion must be 2-D")
        out += [struct.pack("<I", len(cap)), cap, struct.pack("<I", len(conllu)), conllu,
                rec.spec.to_bytes(), struct.pack("<II", *motion.shape), motion.tobytes()]
    return b"".join(out)


def decode_records(data: bytes, vocab: RelationVocab | None = None) -> list[DatasetRecord]:
    vocab = vocab or RelationVocab.default()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(data) - pos} left", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic string", offset=0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=len(MAGIC))
    records = []
    for _ in range(count):
        start = pos
        (n,) = struct.unpack("<I", take(4, "caption length"))
        caption = take(n, "caption").decode("utf-8")
        (n,) = struct.unpack("<I", take(4, "parse length"))
        conllu = take(n, "parse").decode("utf-8")
        try:
            spec = ToyMotionSpec.from_bytes(take(6, "spec"))
        except ContractError as e:
            raise FormatError(str(e), offset=pos - 6) from None
        frames, channels = struct.unpack("<II", take(8, "motion header"))
        payload = take(4 * frames * channels, "motion payload")
        motion = np.frombuffer(payload, dtype="<f4").reshape(frames, channels).astype(np.float32)
        try:
            parse = load_conllu(conllu, vocab)
        except ValueError as e:
            raise FormatError(f"record parse invalid: {e}", offset=start) from None
        records.append(DatasetRecord(caption, parse, motion, spec))
    if pos != len(data):
        raise FormatError("trailing bytes after last record", offset=pos)
    return records


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_dataset(path, records) -> Path:
    atomic_write_bytes(path, encode_records(records))
    return Path(path)


def read_dataset(path, vocab: RelationVocab | None = None) -> list[DatasetRecord]:
    return decode_records(Path(path).read_bytes(), vocab)
