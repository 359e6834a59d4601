from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import yaml
from scipy.io import wavfile

from .dsp_ops import Waveform
from .errors import InvalidAudio

TENSOR_MAGIC = b"SLUT"
TENSOR_FORMAT_VERSION = 1
REPORT_VERSION = 1

MANIFEST_COLUMNS = ["utterance_id", "audio", "speaker_id", "transcript", "intent", "condition", "duration_s"]


def yaml_to_object(yaml_path: str, to_object: bool = True) -> dict | SimpleNamespace:
    """
    Read YAML configuration file and return as dictionary or SimpleNamespace object.

    Args:
        - yaml_path (str): YAML file path.
        - to_object (bool, optional): Whether to transform to Python SimpleNamespace object. Defaults to True.

    Returns:
        - dict | SimpleNamespace: Configuration data as dictionary or SimpleNamespace object
    """

    with open(yaml_path, encoding="utf-8") as file:
        data = yaml.safe_load(file)

    if to_object:
        data = SimpleNamespace(**data)

    return data


def read_manifest(file_path: str, use_polars: bool = False) -> pd.DataFrame:
    """
    Read a JSON-lines manifest and normalise its column types.

    Args:
        - file_path (str): Path to the .jsonl manifest
        - use_polars (bool, optional): If True, read with Polars (falls back to pandas when not installed)

    Returns:
        - pd.DataFrame: One row per utterance with the manifest columns (plus `sample_rate` when present)
    """

    if not os.path.exists(file_path) or not file_path.endswith(".jsonl"):
        raise ValueError(f"Invalid manifest path: {file_path}. Expected an existing .jsonl file")

    if use_polars:
        try:
            import polars as pl
            import pyarrow  # noqa: F401

            df = pl.read_ndjson(file_path).to_pandas()
        except ImportError:
            df = pd.read_json(file_path, lines=True, dtype=False)
    else:
        df = pd.read_json(file_path, lines=True, dtype=False)

    missing = [col for col in MANIFEST_COLUMNS if col not in df.columns]
    if missing:
        raise ValueError(f"Manifest {file_path} is missing columns: {missing}")

    df = normalize_manifest(df)
    df.attrs["root"] = str(Path(file_path).parent)
    return df


def normalize_manifest(df: pd.DataFrame) -> pd.DataFrame:
    """Cast manifest columns to their field types and check the Manifest invariants"""

    df = df.copy()
    for col, dtype in (("utterance_id", "string"), ("audio", "string"), ("speaker_id", "string"), ("transcript", "string"), ("condition", "string")):
        try:
            df[col] = df[col].astype(dtype)
        except Exception as e:
            raise ValueError(f"Failed to convert manifest column {col} to {dtype}: {e}")
    try:
        df["intent"] = df["intent"].astype("int64")
        df["duration_s"] = df["duration_s"].astype("float64")
    except Exception as e:
        raise ValueError(f"Failed to convert manifest numeric columns: {e}")

    if df["utterance_id"].duplicated().any():
        dup = df.loc[df["utterance_id"].duplicated(), "utterance_id"].iloc[0]
        raise ValueError(f"Manifest utterance_id values must be unique, {dup} repeats")
    if (df["duration_s"] <= 0).any():
        raise ValueError("Manifest durations must be positive")
    if (df["intent"] < 0).any():
        raise ValueError("Manifest intent labels must be non-negative")

    return df.reset_index(drop=True)


def write_manifest(df: pd.DataFrame, file_path: str) -> None:
    """Write a manifest as UTF-8 JSON lines, one record per row in row order"""

    os.makedirs(Path(file_path).parent, exist_ok=True)
    with open(file_path, "w", encoding="utf-8") as file:
        for record in df.to_dict(orient="records"):
            clean = {k: (v.item() if isinstance(v, np.generic) else v) for k, v in record.items()}
            file.write(json.dumps(clean, ensure_ascii=False, sort_keys=True) + "\n")


def read_audio(file_path: str, sample_rate: int | None = None) -> Waveform:
    """
    Read 16-bit PCM mono WAV, or raw float32 little-endian audio with an externally supplied sample rate.

    Args:
        - file_path (str): .wav file, or .f32/.raw file
        - sample_rate (int | None): Required for raw files, ignored for WAV

    Returns:
        - Waveform: Samples scaled to [-1, 1]
    """

    if file_path.endswith(".wav"):
        rate, data = wavfile.read(file_path)
        if data.ndim != 1:
            raise InvalidAudio(f"{file_path}: expected mono audio, got {data.shape[1]} channels")
        if data.dtype == np.int16:
            samples = data.astype(np.float64) / 32768.0
        else:
            samples = data.astype(np.float64)
        return Waveform(samples, int(rate))

    if file_path.endswith((".f32", ".raw")):
        if sample_rate is None:
            raise InvalidAudio(f"{file_path}: raw float32 audio needs a sample_rate from the manifest")
        samples = np.fromfile(file_path, dtype="<f4").astype(np.float64)
        return Waveform(samples, int(sample_rate))

    raise InvalidAudio(f"Unsupported audio file: {file_path}")


def write_wav(file_path: str, waveform: Waveform) -> None:
    """Write a waveform as 16-bit PCM mono WAV"""

    os.makedirs(Path(file_path).parent, exist_ok=True)
    pcm = np.clip(np.round(waveform.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(file_path, waveform.sample_rate, pcm)


def save_tensors(file_path: str, tensors: dict[str, np.ndarray]) -> None:
    """
    Save named tensors to the flat container format.

    Layout: magic `SLUT`, version u16, count u32, then per tensor: name length u16, UTF-8 name,
    ndim u8, each dim u32, row-major little-endian float32 payload. Tensors are written in name order.
    """

    os.makedirs(Path(file_path).parent, exist_ok=True)
    with open(file_path, "wb") as file:
        file.write(TENSOR_MAGIC)
        file.write(struct.pack("<HI", TENSOR_FORMAT_VERSION, len(tensors)))
        for name in sorted(tensors):
            array = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            file.write(struct.pack("<H", len(encoded)))
            file.write(encoded)
            file.write(struct.pack("<B", array.ndim))
            file.write(struct.pack(f"<{array.ndim}I", *array.shape))
            file.write(array.tobytes(order="C"))


def load_tensors(file_path: str) -> dict[str, np.ndarray]:
    """Load a named-tensor container written by save_tensors; arrays come back as float64"""

    with open(file_path, "rb") as file:
        payload = file.read()

    if payload[:4] != TENSOR_MAGIC:
        raise ValueError(f"{file_path} is not a tensor container")
    version, count = struct.unpack_from("<HI", payload, 4)
    if version != TENSOR_FORMAT_VERSION:
        raise ValueError(f"{file_path}: unsupported tensor format version {version}")

    offset = 10
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        array = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        tensors[name] = array.astype(np.float64)
    return tensors


def tensor_hash(tensors: dict[str, np.ndarray]) -> str:
    """Content hash over names, shapes and float32 payloads, in name order"""

    digest = hashlib.sha256()
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("ascii"))
        digest.update(array.tobytes(order="C"))
    return digest.hexdigest()


def save_json(data: dict, file_path: str) -> None:
    """Write JSON with sorted keys so equal data gives byte-identical files"""

    os.makedirs(Path(file_path).parent, exist_ok=True)
    with open(file_path, "w", encoding="utf-8") as file:
        file.write(dumps_json(data))


def dumps_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_json(file_path: str) -> dict:
    with open(file_path, encoding="utf-8") as file:
        return json.load(file)


def append_jsonl(file_path: str, record: dict) -> None:
    """Append one record to a newline-delimited JSON trace"""

    os.makedirs(Path(file_path).parent, exist_ok=True)
    with open(file_path, "a", encoding="utf-8") as file:
        file.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
