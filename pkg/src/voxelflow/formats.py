"""Binary file formats: PPM/PGM images, DVFT tensors, DVFW checkpoints, DVFV videos.

All multi-byte fields are little-endian.

* DVFT: ``b"DVFT"``, u32 rank, rank x u32 extents, float32 data (row-major).
* DVFW: ``b"DVFW"``, u32 count, then per tensor u32 name length, UTF-8 name,
  embedded DVFT record.
* DVFV: ``b"DVFV"``, u32 H, W, L, C, then float32 frames, each frame stored
  channel-major (C, H, W).
"""
import struct

import numpy as np


class FormatError(ValueError):
    """Malformed or truncated file; the message names the byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# -- PPM / PGM ----------------------------------------------------------------

def write_pnm(path, image):
    """Write uint8 ``image``: (H, W) as binary PGM, (H, W, 3) as binary PPM."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise TypeError(f"PNM images must be uint8, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


write_ppm = write_pgm = write_pnm


def _pnm_token(data, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return data[start:pos], pos, start


def parse_pnm(data):
    """Decode binary PGM/PPM bytes into a uint8 array."""
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {data[:2]!r}, expected P5 or P6", 0)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    values = []
    for _ in range(3):
        tok, pos, start = _pnm_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"header field {tok!r} is not a non-negative integer", start)
        values.append(int(tok))
    w, h, maxval = values
    if w < 1 or h < 1:
        raise FormatError(f"image extents {w}x{h} must be positive", pos)
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported, only 255", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos)
    pos += 1
    need = w * h * channels
    if len(data) - pos < need:
        raise FormatError(f"pixel data truncated: need {need} bytes, have {len(data) - pos}", len(data))
    img = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return img.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def read_pnm(path):
    with open(path, "rb") as f:
        return parse_pnm(f.read())


read_ppm = read_pgm = read_pnm


# -- DVFT tensors -------------------------------------------------------------

def encode_tensor(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    head = b"DVFT" + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(data, offset=0):
    """Decode one DVFT record starting at ``offset``; returns ``(array, end_offset)``."""
    if data[offset:offset + 4] != b"DVFT":
        raise FormatError(f"bad tensor magic {bytes(data[offset:offset + 4])!r}", offset)
    pos = offset + 4
    if len(data) < pos + 4:
        raise FormatError("truncated tensor rank", pos)
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + 4 * rank:
        raise FormatError("truncated tensor extents", pos)
    shape = struct.unpack_from(f"<{rank}I", data, pos)
    if any(s < 1 for s in shape):
        raise FormatError(f"tensor extents {shape} must all be >= 1", pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(data) < pos + 4 * count:
        raise FormatError(f"tensor data truncated: need {4 * count} bytes, have {len(data) - pos}", len(data))
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float32), pos + 4 * count


def write_tensor(path, array):
    with open(path, "wb") as f:
        f.write(encode_tensor(array))


def read_tensor(path):
    with open(path, "rb") as f:
        data = f.read()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError("trailing bytes after tensor", end)
    return arr


# -- DVFW checkpoints ---------------------------------------------------------

def write_checkpoint_tensors(path, tensors):
    """Write an ordered mapping name -> array."""
    parts = [b"DVFW", struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_tensor(arr)]
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_checkpoint_tensors(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != b"DVFW":
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", 0)
    if len(data) < 8:
        raise FormatError("truncated tensor count", 4)
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = {}
    for _ in range(count):
        if len(data) < pos + 4:
            raise FormatError("truncated name length", pos)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if len(data) < pos + n:
            raise FormatError("truncated tensor name", pos)
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        out[name], pos = decode_tensor(data, pos)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint", pos)
    return out


# -- DVFV videos --------------------------------------------------------------

def encode_video(video):
    """``video`` is (L, C, H, W) float data in [-1, 1]."""
    v = np.ascontiguousarray(video, dtype="<f4")
    L, C, H, W = v.shape
    return b"DVFV" + struct.pack("<4I", H, W, L, C) + v.tobytes()


def decode_video(data):
    if data[:4] != b"DVFV":
        raise FormatError(f"bad video magic {data[:4]!r}", 0)
    if len(data) < 20:
        raise FormatError("truncated video header", len(data))
    H, W, L, C = struct.unpack_from("<4I", data, 4)
    if min(H, W, L, C) < 1:
        raise FormatError(f"video extents H={H} W={W} L={L} C={C} must all be >= 1", 4)
    count = H * W * L * C
    if len(data) - 20 != 4 * count:
        raise FormatError(f"video data has {len(data) - 20} bytes, expected {4 * count}", min(len(data), 20 + 4 * count))
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(L, C, H, W).astype(np.float32)


def write_video(path, video):
    with open(path, "wb") as f:
        f.write(encode_video(video))


def read_video(path):
    with open(path, "rb") as f:
        return decode_video(f.read())


# -- key=value text -----------------------------------------------------------

class ConfigError(ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_key_values(text):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", n)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", n)
        out[key] = value
    return out


def format_key_values(mapping):
    return "".join(f"{k}={v}\n" for k, v in mapping.items())
