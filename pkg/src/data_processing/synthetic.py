# src/data_processing/synthetic.py
"""
Deterministic synthetic dataset generation for experiments.

Each file is generated from its own RNG derived from (seed, file index), so a
given spec always produces byte-identical files, and a manifest listing the
files, their record counts and the seed is written next to them.
"""

import logging
import random
from pathlib import Path
from typing import List, Literal, Union

from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from src.core.binary import fnv1a_64
from src.core.errors import EmptyDataset, IoFailure
from src.data_processing.records import RECORD_SUFFIX, write_records
from src.pipeline.elements import Element

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class SyntheticSpec(BaseModel):
    """
    Shape of a synthetic dataset.

    Payload sizes are drawn uniformly from [payload_bytes_min, payload_bytes_max]
    and raised to at least `seq_len` bytes, one byte per token.
    """
    num_files: int = Field(..., ge=0, description="Number of record files.")
    records_per_file: int = Field(..., ge=0)
    payload_bytes_min: int = Field(16, ge=0)
    payload_bytes_max: int = Field(64, ge=0)
    seq_len_distribution: Literal["uniform", "bimodal"] = "uniform"
    seq_len_min: int = Field(1, ge=0)
    seq_len_max: int = Field(512, ge=0)
    short_len: int = Field(16, ge=0, description="Bimodal: short sequence length.")
    long_len: int = Field(480, ge=0, description="Bimodal: long sequence length.")
    long_fraction: float = Field(0.5, ge=0.0, le=1.0, description="Bimodal: share of long sequences.")
    seed: int = 0

    @model_validator(mode="after")
    def check_ranges(self) -> "SyntheticSpec":
        if self.payload_bytes_min > self.payload_bytes_max:
            raise ValueError("payload_bytes_min must not exceed payload_bytes_max")
        if self.seq_len_min > self.seq_len_max:
            raise ValueError("seq_len_min must not exceed seq_len_max")
        return self


class ManifestFile(BaseModel):
    name: str
    count: int


class DatasetManifest(BaseModel):
    files: List[ManifestFile]
    seed: int
    spec: SyntheticSpec

    @property
    def total_records(self) -> int:
        return sum(f.count for f in self.files)


def _seq_len(spec: SyntheticSpec, rng: random.Random) -> int:
    if spec.seq_len_distribution == "bimodal":
        return spec.long_len if rng.random() < spec.long_fraction else spec.short_len
    return rng.randint(spec.seq_len_min, spec.seq_len_max)


def _file_elements(spec: SyntheticSpec, file_index: int) -> List[Element]:
    rng = random.Random(fnv1a_64(f"{spec.seed}:{file_index}".encode()))
    elements = []
    for ordinal in range(spec.records_per_file):
        seq_len = _seq_len(spec, rng)
        size = max(rng.randint(spec.payload_bytes_min, spec.payload_bytes_max), seq_len)
        elements.append(Element(payload=rng.randbytes(size), seq_len=seq_len, key=ordinal))
    return elements


def generate_synthetic(
    spec: SyntheticSpec,
    out_dir: Union[str, Path],
    progress: bool = False,
) -> DatasetManifest:
    """
    Writes `spec.num_files` record files plus `manifest.json` into `out_dir`.

    Raises:
        EmptyDataset: `num_files` is zero.
        IoFailure: the directory or files cannot be written.
    """
    if spec.num_files == 0:
        raise EmptyDataset("a synthetic dataset needs at least one file")
    out_dir = Path(out_dir)
    logger.info(
        f"Generating {spec.num_files} x {spec.records_per_file} synthetic records in '{out_dir}' (seed {spec.seed})."
    )
    files: List[ManifestFile] = []
    for file_index in tqdm(range(spec.num_files), desc="Generating files", disable=not progress):
        name = f"part-{file_index:05d}{RECORD_SUFFIX}"
        record_file = write_records(out_dir / name, _file_elements(spec, file_index))
        files.append(ManifestFile(name=name, count=record_file.count))
    manifest = DatasetManifest(files=files, seed=spec.seed, spec=spec)
    try:
        (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write manifest in '{out_dir}': {e}") from e
    return manifest


def load_manifest(dataset_dir: Union[str, Path]) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoFailure(f"cannot read manifest '{path}': {e}") from e
