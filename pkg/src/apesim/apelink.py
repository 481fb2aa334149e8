"""APElink channel: word-stuffing framing, efficiency model, credit flow control.

Wire format, one little-endian 128-bit word at a time::

    header   bits[0:32)    payload byte length of this frame
             bits[32:64)   destination node id
             bits[64:96)   message id
             bits[96:104)  piggyback diagnostic byte
             bits[104:128) reserved, zero
    payload  ceil(length / 16) words, last word zero-padded
    footer   bits[0:32)    CRC placeholder (zero)
             bits[32:64)   frame sequence number within the message
             bit  64       last frame of the message
             bit  65       control frame (diagnostic only, no message)
             bit  66       CRC-invalid flag (set only by error injection)
             bits[120:128) end marker 0xFD
    idle     bits[120:128) 0xBC, everything else zero

Idle words may appear between frames and are skipped by the decoder.
"""

from __future__ import annotations

import functools
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Optional

from apesim.errors import ConfigError, FrameCorruptionError

WORD_BITS = 128
WORD_BYTES = WORD_BITS // 8
WORD_MASK = (1 << WORD_BITS) - 1

END_MARKER = 0xFD
IDLE_MARKER = 0xBC
IDLE_WORD = IDLE_MARKER << 120

_LAST = 1 << 64
_CONTROL = 1 << 65
_CRC_BAD = 1 << 66


def _fraction(value) -> Fraction:
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


@dataclass(frozen=True)
class LinkProfile:
    """Lane rate and line encoding of one off-board channel."""

    name: str
    lane_rate_gbps: Fraction
    lanes: int = 4
    encoding: Fraction = Fraction(8, 10)
    hop_latency_ns: int = 300

    def __post_init__(self):
        object.__setattr__(self, "lane_rate_gbps", _fraction(self.lane_rate_gbps))
        object.__setattr__(self, "encoding", _fraction(self.encoding))
        if self.lane_rate_gbps <= 0:
            raise ConfigError(f"link {self.name}: lane rate must be positive")
        if self.lanes < 1:
            raise ConfigError(f"link {self.name}: lanes must be >= 1")
        if not 0 < self.encoding <= 1:
            raise ConfigError(f"link {self.name}: encoding must be in (0, 1]")
        if self.hop_latency_ns < 0:
            raise ConfigError(f"link {self.name}: hop latency must be >= 0")

    @property
    def raw_gbps(self) -> Fraction:
        return self.lane_rate_gbps * self.lanes

    @property
    def data_gbps(self) -> Fraction:
        """Bit rate left after line encoding (bits per ns)."""
        return self.raw_gbps * self.encoding

    @property
    def data_bytes_per_s(self) -> float:
        return float(self.data_gbps * 1_000_000_000 / 8)


LINK_PRESETS = {
    "apelink-operational": LinkProfile("apelink-operational", Fraction(7), 4, Fraction(8, 10)),
    "apelink-max": LinkProfile("apelink-max", Fraction(17, 2), 4, Fraction(8, 10)),
    "stratix5-measured": LinkProfile("stratix5-measured", Fraction(113, 10), 4, Fraction(64, 66)),
    "stratix5-target": LinkProfile("stratix5-target", Fraction(141, 10), 4, Fraction(64, 66)),
}


def link_preset(name: str, **overrides) -> LinkProfile:
    try:
        base = LINK_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown link preset {name!r}; known: {sorted(LINK_PRESETS)}") from None
    if not overrides:
        return base
    fields = dict(name=base.name, lane_rate_gbps=base.lane_rate_gbps, lanes=base.lanes,
                  encoding=base.encoding, hop_latency_ns=base.hop_latency_ns)
    fields.update(overrides)
    return LinkProfile(**fields)


def control_words_for(efficiency: Fraction, max_payload_words: int) -> Fraction:
    """Per-max-packet overhead K that makes ``P / (P + K)`` equal ``efficiency``."""
    efficiency = _fraction(efficiency)
    return max_payload_words * (1 - efficiency) / efficiency


@dataclass(frozen=True)
class FramingParams:
    """Frame layout plus the amortized control-word budget.

    ``control_words`` (K) is the total wire overhead charged per max-size
    packet, header and footer included. Smaller frames pay ``K`` pro rata,
    but never less than their own header and footer.
    """

    header_words: int = 1
    footer_words: int = 1
    control_words: Fraction = Fraction(3456, 49)
    max_payload_words: int = 256
    buffer_bytes: int = 40960
    word_bits: int = WORD_BITS

    def __post_init__(self):
        object.__setattr__(self, "control_words", _fraction(self.control_words))
        if self.word_bits != WORD_BITS:
            raise ConfigError(f"only {WORD_BITS}-bit link words are supported")
        if self.header_words < 1 or self.footer_words < 1:
            raise ConfigError("frames need at least one header and one footer word")
        if self.max_payload_words < 1:
            raise ConfigError("max_payload_words must be >= 1")
        if self.control_words < self.header_words + self.footer_words:
            raise ConfigError("control_words must cover header and footer words")
        if self.buffer_bytes < self.max_frame_words * WORD_BYTES:
            raise ConfigError(f"buffer of {self.buffer_bytes} B cannot hold one max frame")

    @property
    def frame_overhead(self) -> int:
        return self.header_words + self.footer_words

    @property
    def max_payload_bytes(self) -> int:
        return self.max_payload_words * WORD_BYTES

    @property
    def max_frame_words(self) -> int:
        return self.max_payload_words + self.frame_overhead

    @property
    def buffer_words(self) -> int:
        return self.buffer_bytes // WORD_BYTES

    def overhead_words(self, payload_words: int) -> Fraction:
        amortized = self.control_words * payload_words / self.max_payload_words
        return max(Fraction(self.frame_overhead), amortized)

    def wire_words(self, payload_words: int) -> Fraction:
        """Words a frame occupies on the line, control words included."""
        return payload_words + self.overhead_words(payload_words)

    @property
    def asymptotic_efficiency(self) -> Fraction:
        return Fraction(self.max_payload_words, 1) / (self.max_payload_words + self.control_words)


def payload_words(nbytes: int) -> int:
    return -(-nbytes // WORD_BYTES)


def efficiency_exact(payload_bytes: int, params: FramingParams) -> Fraction:
    if payload_bytes < 1:
        raise ValueError("efficiency needs at least one payload byte")
    w = payload_words(payload_bytes)
    return Fraction(w) / params.wire_words(w)


def efficiency(payload_bytes: int, params: FramingParams) -> float:
    """Payload words over total wire words for a message of this size."""
    return float(efficiency_exact(payload_bytes, params))


def goodput(profile: LinkProfile, params: FramingParams) -> float:
    """Sustained payload bytes per second of a saturated channel."""
    return float(profile.data_gbps * params.asymptotic_efficiency * 1_000_000_000 / 8)


def serialization_ns(wire_words, profile: LinkProfile) -> int:
    """Time the channel is occupied by ``wire_words`` words, rounded up to 1 ns."""
    return math.ceil(Fraction(wire_words) * WORD_BITS / profile.data_gbps)


@functools.lru_cache(maxsize=4096)
def _frame_ns(params: "FramingParams", profile: LinkProfile, nwords: int) -> int:
    return serialization_ns(params.wire_words(nwords), profile)


# -- codec -------------------------------------------------------------------

@dataclass
class Frame:
    dst: int
    msg_id: int
    length: int
    seq: int = 0
    last: bool = True
    diag: int = 0
    control: bool = False
    crc_ok: bool = True
    payload: Optional[bytes] = None
    ref: Any = field(default=None, repr=False, compare=False)

    @property
    def payload_words(self) -> int:
        return payload_words(self.length)

    def stored_words(self, params: FramingParams) -> int:
        """Receive-buffer words this frame holds (control words are not stored)."""
        return self.payload_words + params.frame_overhead

    def header_word(self) -> int:
        if not 0 <= self.diag <= 0xFF:
            raise ValueError(f"diagnostic byte out of range: {self.diag}")
        return (self.length & 0xFFFFFFFF) | (self.dst & 0xFFFFFFFF) << 32 \
            | (self.msg_id & 0xFFFFFFFF) << 64 | self.diag << 96

    def footer_word(self) -> int:
        word = (self.seq & 0xFFFFFFFF) << 32 | END_MARKER << 120
        if self.last:
            word |= _LAST
        if self.control:
            word |= _CONTROL
        if not self.crc_ok:
            word |= _CRC_BAD
        return word

    def words(self, params: FramingParams = FramingParams()) -> list[int]:
        data = self.payload or b""
        if len(data) != self.length:
            raise ValueError("frame payload does not match its recorded length")
        padded = data + bytes(-len(data) % WORD_BYTES)
        body = [int.from_bytes(padded[i:i + WORD_BYTES], "little")
                for i in range(0, len(padded), WORD_BYTES)]
        # extra header/footer words beyond the first are reserved zero
        head = [self.header_word()] + [0] * (params.header_words - 1)
        foot = [0] * (params.footer_words - 1) + [self.footer_word()]
        return head + body + foot


def frame(message: bytes, params: FramingParams = FramingParams(), *, dst: int = 0,
          msg_id: int = 0, diag: int = 0) -> list[Frame]:
    """Split a message into frames of at most ``max_payload_words`` words."""
    message = bytes(message)
    chunk = params.max_payload_bytes
    pieces = [message[i:i + chunk] for i in range(0, len(message), chunk)] or [b""]
    last = len(pieces) - 1
    return [Frame(dst=dst, msg_id=msg_id, length=len(p), seq=i, last=i == last,
                  diag=diag if i == 0 else 0, payload=p)
            for i, p in enumerate(pieces)]


def control_frame(diag: int, dst: int = 0) -> Frame:
    """Header+footer frame used to carry a diagnostic on an idle channel."""
    return Frame(dst=dst, msg_id=0, length=0, diag=diag, control=True, payload=b"")


def encode_words(frames: Iterable[Frame], params: FramingParams = FramingParams(),
                 idle_between: int = 0) -> list[int]:
    out: list[int] = []
    for f in frames:
        out.extend(f.words(params))
        out.extend([IDLE_WORD] * idle_between)
    return out


def words_to_bytes(words: Iterable[int]) -> bytes:
    return b"".join(w.to_bytes(WORD_BYTES, "little") for w in words)


def bytes_to_words(data: bytes) -> list[int]:
    if len(data) % WORD_BYTES:
        raise ValueError("byte stream is not a whole number of link words")
    return [int.from_bytes(data[i:i + WORD_BYTES], "little")
            for i in range(0, len(data), WORD_BYTES)]


@dataclass
class Delivered:
    """A reassembled message, or a bare diagnostic when ``control`` is set."""

    payload: bytes
    diagnostics: list[int]
    dst: int = 0
    msg_id: int = 0
    control: bool = False
    crc_ok: bool = True


class Deframer:
    """Streaming decoder; accepts arbitrary byte chunks."""

    def __init__(self, params: FramingParams = FramingParams()):
        self.params = params
        self._pending = b""
        self._words: list[int] = []
        self._offset = 0  # absolute word offset of self._words[0]
        self._partial: dict[int, tuple[int, list[bytes], list[int], bool]] = {}

    def feed(self, data: bytes) -> list[Delivered]:
        data = self._pending + bytes(data)
        cut = len(data) - len(data) % WORD_BYTES
        self._pending = data[cut:]
        self._words.extend(int.from_bytes(data[i:i + WORD_BYTES], "little")
                           for i in range(0, cut, WORD_BYTES))
        return self._drain()

    def feed_words(self, words: Iterable[int]) -> list[Delivered]:
        self._words.extend(words)
        return self._drain()

    def finish(self) -> None:
        """Raise if the stream stopped in the middle of a frame or message."""
        if self._pending or self._words:
            raise FrameCorruptionError("stream ends inside a frame", self._offset)
        if self._partial:
            raise FrameCorruptionError("stream ends inside a multi-frame message", self._offset)

    def _drain(self) -> list[Delivered]:
        out: list[Delivered] = []
        p = self.params
        words = self._words
        i = 0
        while i < len(words):
            head = words[i]
            if head == IDLE_WORD:
                i += 1
                continue
            if head >> 104:
                raise FrameCorruptionError("expected header or idle word", self._offset + i)
            length = head & 0xFFFFFFFF
            nwords = payload_words(length)
            if nwords > p.max_payload_words:
                raise FrameCorruptionError(f"frame length {length} exceeds max payload",
                                           self._offset + i)
            total = p.header_words + nwords + p.footer_words
            if i + total > len(words):
                break
            foot = words[i + total - 1]
            if foot >> 120 != END_MARKER:
                raise FrameCorruptionError("missing end marker", self._offset + i + total - 1)
            body = words[i + p.header_words:i + p.header_words + nwords]
            payload = b"".join(w.to_bytes(WORD_BYTES, "little") for w in body)[:length]
            dst = (head >> 32) & 0xFFFFFFFF
            msg_id = (head >> 64) & 0xFFFFFFFF
            diag = (head >> 96) & 0xFF
            seq = (foot >> 32) & 0xFFFFFFFF
            crc_ok = not foot & _CRC_BAD
            if foot & _CONTROL:
                out.append(Delivered(b"", [diag], dst, msg_id, control=True, crc_ok=crc_ok))
            else:
                got = self._reassemble(dst, msg_id, seq, payload, diag, crc_ok,
                                       bool(foot & _LAST), self._offset + i)
                if got is not None:
                    out.append(got)
            i += total
        del words[:i]
        self._offset += i
        return out

    def _reassemble(self, dst, msg_id, seq, payload, diag, crc_ok, last, offset):
        expected, chunks, diags, ok = self._partial.pop(msg_id, (0, [], [], True))
        if seq != expected:
            raise FrameCorruptionError(
                f"message {msg_id}: frame sequence {seq}, expected {expected}", offset)
        chunks.append(payload)
        if diag:
            diags.append(diag)
        ok = ok and crc_ok
        if not last:
            self._partial[msg_id] = (expected + 1, chunks, diags, ok)
            return None
        return Delivered(b"".join(chunks), diags, dst, msg_id, crc_ok=ok)


def deframe(stream, params: FramingParams = FramingParams()) -> list[Delivered]:
    """Decode a complete word stream (list of ints) or byte string."""
    d = Deframer(params)
    if isinstance(stream, (bytes, bytearray, memoryview)):
        out = d.feed(bytes(stream))
    else:
        out = d.feed_words(stream)
    d.finish()
    return out


# -- channel -----------------------------------------------------------------

@dataclass
class CreditState:
    credits_words: int
    capacity_words: int

    def __post_init__(self):
        if not 0 <= self.credits_words <= self.capacity_words:
            raise ValueError(f"credits {self.credits_words} outside [0, {self.capacity_words}]")


def transmit(frame: Frame, profile: LinkProfile, params: FramingParams, credits: CreditState,
             now: int, free_at: int = 0) -> tuple[int, int, CreditState]:
    """Timing of one frame on an idle-or-busy channel.

    Returns ``(departure, arrival, credits_after)``. The caller must only
    call this when ``credits`` cover the frame; otherwise the frame waits.
    """
    need = frame.stored_words(params)
    if credits.credits_words < need:
        raise ValueError("insufficient credits: frame must stay queued")
    departure = max(now, free_at)
    ser = serialization_ns(params.wire_words(frame.payload_words), profile)
    arrival = departure + ser + profile.hop_latency_ns
    return departure, arrival, CreditState(credits.credits_words - need, credits.capacity_words)


class Channel:
    """One directed APElink channel driven by an :class:`~apesim.engine.Engine`.

    Frames leave in FIFO order when the channel is free and the peer has
    granted enough credits. ``on_arrival(frame, channel)`` runs at the far
    end; the receiver later calls :meth:`return_credits` once it has
    drained the frame from its buffer.
    """

    def __init__(self, engine, src: int, direction, dst: int, profile: LinkProfile,
                 params: FramingParams, on_arrival: Callable[[Frame, "Channel"], None]):
        self.engine = engine
        self.src = src
        self.direction = direction
        self.dst = dst
        self.profile = profile
        self.params = params
        self.on_arrival = on_arrival
        self.capacity = params.buffer_words
        self.credits = self.capacity
        self.queue: deque[Frame] = deque()
        self.free_at = 0
        self.alive = True
        self.pending_diag: Optional[int] = None
        self.diag_sink: Optional[Callable[[int, "Channel"], None]] = None
        self.name = f"ch{src}{direction}"
        self.words_in = 0
        self.words_out = 0
        self.frames_sent = 0
        self.frames_dropped = 0
        self.diag_piggybacked = 0
        self.diag_control = 0
        self._kick_pending = False
        self._ser_cache: dict[int, int] = {}

    def serialization(self, nwords: int) -> int:
        ser = self._ser_cache.get(nwords)
        if ser is None:
            ser = self._ser_cache[nwords] = _frame_ns(self.params, self.profile, nwords)
        return ser

    @property
    def occupancy_words(self) -> int:
        return self.capacity - self.credits

    def send(self, frame: Frame) -> None:
        if not self.alive:
            self.frames_dropped += 1
            return
        self.queue.append(frame)
        self._pump()

    def _pump(self) -> None:
        engine = self.engine
        now = engine.now()
        while self.queue:
            if self.free_at > now:
                if not self._kick_pending:
                    self._kick_pending = True
                    engine.schedule(self.free_at, self._kick, target=self.name, kind="free")
                return
            f = self.queue[0]
            need = f.payload_words + self.params.frame_overhead
            if need > self.credits:
                return  # resumes from return_credits
            self.queue.popleft()
            if self.pending_diag is not None and not f.control:
                f.diag = self.pending_diag
                self.pending_diag = None
                self.diag_piggybacked += 1
            self.credits -= need
            self.words_in += need
            ser = self.serialization(f.payload_words)
            self.free_at = now + ser
            self.frames_sent += 1
            engine.schedule(self.free_at + self.profile.hop_latency_ns, self._arrive,
                            target=self.name, kind="arrive", data=f)

    def _kick(self, _ev) -> None:
        self._kick_pending = False
        self._pump()

    def _arrive(self, ev) -> None:
        if not self.alive:
            self.frames_dropped += 1
            return
        f = ev.data
        self.words_out += f.payload_words + self.params.frame_overhead
        if f.diag and self.diag_sink is not None:
            self.diag_sink(f.diag, self)
        self.on_arrival(f, self)

    def return_credits(self, words: int) -> None:
        """Credits granted back by the receiver; they travel one hop latency."""
        self.engine.after(self.profile.hop_latency_ns, self._credit, target=self.name,
                          kind="credit", data=words)

    def _credit(self, ev) -> None:
        if not self.alive:
            return
        self.credits = min(self.capacity, self.credits + ev.data)
        self._pump()

    def send_diagnostic(self, diag: int) -> None:
        """Carry a diagnostic byte to the far end without touching data timing.

        A queued data frame takes it in its header. On an idle channel it
        goes in a header+footer control frame that rides the control-word
        slots already budgeted by ``control_words``, so data frames never
        wait for it.
        """
        if not self.alive:
            return
        if self.queue:
            self.pending_diag = diag
            return
        self.diag_control += 1
        delay = self.serialization(0) + self.profile.hop_latency_ns
        self.engine.after(delay, self._diag_arrive, target=self.name, kind="diag", data=diag)

    def _diag_arrive(self, ev) -> None:
        if self.alive and self.diag_sink is not None:
            self.diag_sink(ev.data, self)

    def fail(self) -> None:
        """Silence the channel: queued and in-flight frames are lost."""
        self.alive = False
        self.frames_dropped += len(self.queue)
        self.queue.clear()
        self.pending_diag = None
