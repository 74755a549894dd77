"""Length-prefixed binary messages between coordinator and clients.

Request:  u32 length | u8 type | body       (big-endian; length covers type+body)
Response: u32 length | u8 status | body    (status 0 = ok, 1 = error)

Strings are u16 length + UTF-8, byte strings u32 length + bytes. An error
body is the exception class name followed by the message, both strings.
"""

import asyncio
import struct
from enum import IntEnum

from ibcr.domain import errors
from ibcr.domain.errors import CoordinatorError


LENGTH = struct.Struct(">I")
U8 = struct.Struct(">B")
U16 = struct.Struct(">H")
U32 = struct.Struct(">I")

MAX_MESSAGE = 64 << 20

OK = 0
ERROR = 1


class MessageType(IntEnum):
    REGISTER = 1
    CKPT_PHASE_ACK = 2
    PUBLISH = 3
    SUBSCRIBE = 4
    BARRIER = 5
    CTRL_CKPT = 6
    CTRL_RESTART = 7


def pack_u32(value: int) -> bytes:
    return U32.pack(value)


def pack_str(value: str) -> bytes:
    raw = value.encode()
    return U16.pack(len(raw)) + raw


def pack_bytes(value: bytes) -> bytes:
    return U32.pack(len(value)) + value


def frame(tag: int, body: bytes = b"") -> bytes:
    return LENGTH.pack(1 + len(body)) + U8.pack(tag) + body


class BodyReader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CoordinatorError("truncated message body")
        chunk = self.body[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return U32.unpack(self._take(U32.size))[0]

    def str(self) -> str:
        (n,) = U16.unpack(self._take(U16.size))
        return self._take(n).decode()

    def bytes(self) -> bytes:
        return self._take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.body):
            raise CoordinatorError(f"{len(self.body) - self.pos} trailing bytes in message")


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    (length,) = LENGTH.unpack(await reader.readexactly(LENGTH.size))
    if not 1 <= length <= MAX_MESSAGE:
        raise CoordinatorError(f"bad message length {length}")
    data = await reader.readexactly(length)
    return data[0], data[1:]


def error_body(err: Exception) -> bytes:
    return pack_str(type(err).__name__) + pack_str(str(err))


def raise_error(body: bytes) -> None:
    reader = BodyReader(body)
    name, message = reader.str(), reader.str()
    cls = getattr(errors, name, None)
    if not (isinstance(cls, type) and issubclass(cls, errors.IbcrError)):
        cls = CoordinatorError
    raise cls(message)
