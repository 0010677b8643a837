import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from dagster import (
    Field,
    InitResourceContext,
    InputContext,
    OutputContext,
    UPathIOManager,
    io_manager,
)
from upath import UPath

from .config import ModelConfig
from .errors import CheckpointNotFoundError, ContractViolationError
from .model import DTYPE, DeltaProductModel

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'


@dataclass
class Checkpoint:
    """Model configuration plus its ``state_dict`` tensors."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor]

    @classmethod
    def from_model(cls, model: DeltaProductModel) -> 'Checkpoint':
        return cls(config=model.cfg, tensors={k: v.detach().clone() for k, v in model.state_dict().items()})

    def to_model(self) -> DeltaProductModel:
        """Rebuilds the model in eval mode.

        Raises:
            - ContractViolationError: When the tensors do not fit the configuration.
        """
        model = DeltaProductModel(self.config)
        try:
            model.load_state_dict(self.tensors)
        except RuntimeError as e:
            raise ContractViolationError(f'checkpoint tensors do not match its configuration: {e}') from e
        model.eval()
        return model


def write_checkpoint(checkpoint: Checkpoint, directory: str | Path | UPath) -> UPath:
    """Writes ``manifest.json`` plus one little-endian float64 ``.bin`` blob per tensor into ``directory``.

    Args:
        - checkpoint (Checkpoint):
            Configuration and tensors to persist.
        - directory (str | Path | UPath):
            Target directory, created if missing. Existing blobs of the same names are overwritten.

    Returns:
        - UPath: The checkpoint directory.
    """
    directory = UPath(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, tensor in checkpoint.tensors.items():
        data = tensor.detach().to(DTYPE).cpu().contiguous().numpy().astype('<f8')
        file_name = f'{name}.bin'
        (directory / file_name).write_bytes(data.tobytes())
        entries[name] = {'shape': list(data.shape), 'dtype': 'float64', 'file': file_name}
    manifest = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'config': checkpoint.config.model_dump(mode='json'),
        'tensors': entries,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_checkpoint(directory: str | Path | UPath) -> Checkpoint:
    """Reads a checkpoint written by ``write_checkpoint``.

    Raises:
        - CheckpointNotFoundError: When the manifest is missing.
        - ContractViolationError: When the manifest is not valid JSON, a tensor blob is missing, or the format
            version, a dtype or a blob size does not match the manifest.
    """
    directory = UPath(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointNotFoundError(str(manifest_path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ContractViolationError(f'checkpoint manifest {manifest_path} is not valid JSON: {e}') from e
    if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise ContractViolationError(f'unsupported checkpoint format version {manifest.get("format_version")!r}')
    tensors = {}
    for name, entry in manifest['tensors'].items():
        if entry['dtype'] != 'float64':
            raise ContractViolationError(f'tensor {name} has unsupported dtype {entry["dtype"]}')
        blob = directory / entry['file']
        if not blob.exists():
            raise ContractViolationError(f'tensor {name}: blob {blob} is missing')
        data = np.frombuffer(blob.read_bytes(), dtype='<f8')
        shape = tuple(entry['shape'])
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ContractViolationError(f'tensor {name}: blob holds {data.size} values, manifest says {shape}')
        tensors[name] = torch.from_numpy(data.reshape(shape).astype(np.float64))
    return Checkpoint(config=ModelConfig.model_validate(manifest['config']), tensors=tensors)


class JsonObjectIOManager(UPathIOManager):
    """Dagster IOManager for writing / reading JSON files.

    Args:
        - base_path (UPath): \
            Directory the asset files are stored in.
    """

    extension: str = '.json'

    def load_from_path(self, context: InputContext, path: UPath) -> Any:
        """Loads a JSON serializable object from ``path``.

        Raises:
            - FileNotFoundError: When the file does not exist.
            - ValueError: When the file does not contain valid JSON.
        """
        if not path.exists():
            raise FileNotFoundError(f'Could not find file {path}')
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f'File {path} does not contain valid JSON. Message: {e.msg}')

    def dump_to_path(self, context: OutputContext, obj: Any, path: UPath) -> None:
        """Saves a JSON serializable object to ``path``.

        Raises:
            - TypeError: When ``obj`` is not JSON serializable.
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2))


class TextObjectIOManager(UPathIOManager):
    """Dagster IOManager for text files, e.g. markdown reports."""

    extension: str = '.txt'

    def load_from_path(self, context: InputContext, path: UPath) -> str:
        if not path.exists():
            raise FileNotFoundError(f'Could not find file {path}')
        return path.read_text(encoding='utf-8')

    def dump_to_path(self, context: OutputContext, obj: str, path: UPath) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(obj, encoding='utf-8')


class DataFrameCsvIOManager(UPathIOManager):
    """Dagster IOManager storing pandas DataFrames as CSV without index."""

    extension: str = '.csv'

    def load_from_path(self, context: InputContext, path: UPath) -> pd.DataFrame:
        if not path.exists():
            raise FileNotFoundError(f'Could not find file {path}')
        with path.open('r') as fp:
            return pd.read_csv(fp)

    def dump_to_path(self, context: OutputContext, obj: pd.DataFrame, path: UPath) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w') as fp:
            obj.to_csv(fp, index=False)


class CheckpointIOManager(UPathIOManager):
    """Dagster IOManager storing ``Checkpoint`` objects as a manifest + tensor blob directory."""

    extension: str = ''

    def load_from_path(self, context: InputContext, path: UPath) -> Checkpoint:
        return read_checkpoint(path)

    def dump_to_path(self, context: OutputContext, obj: Checkpoint, path: UPath) -> None:
        write_checkpoint(obj, path)


IO_MANAGER_TYPES = {
    'json': JsonObjectIOManager,
    'text': TextObjectIOManager,
    'csv': DataFrameCsvIOManager,
    'checkpoint': CheckpointIOManager,
}


@io_manager(
    description='IO Manager for storing experiment artifacts on the local filesystem.',
    config_schema={
        'base_dir': Field(str, is_required=False, default_value='runs/dagster'),
        'data_type': Field(str, is_required=False, default_value='json'),
        'file_extension': Field(str, is_required=False),
    },
)
def local_io_manager(init_context: InitResourceContext) -> UPathIOManager:
    """Persistent IO manager writing artifacts below a base directory.

    Currently supported data types:
    - `json`: a JSON serializable object (e.g. dict, list) stored as `<asset_key>.json`
    - `text`: a string stored as `<asset_key>.txt`
    - `csv`: a pandas DataFrame stored as `<asset_key>.csv`
    - `checkpoint`: a `Checkpoint` stored as directory `<asset_key>/` with `manifest.json` and tensor blobs

    An asset with key `AssetKey(["one", "two"])` and base directory "runs/x" is stored under "runs/x/one/two".
    Subsequent materializations of an asset overwrite previous materializations of that asset.

    Args:
        - init_context (dagster.InitResourceContext): \
            Configuration provided from the definitions file.

    Returns:
        - UPathIOManager: IO manager for the configured data type.

    Raises:
        - ValueError: When the data type is not supported.
    """
    data_type = init_context.resource_config.get('data_type', 'json')
    base_dir = init_context.resource_config.get('base_dir', 'runs/dagster')
    file_extension = init_context.resource_config.get('file_extension')  # optional

    if data_type not in IO_MANAGER_TYPES:
        raise ValueError(
            f'Invalid config value for option "data_type": Given was "{data_type}". '
            f'Allowed are {", ".join(repr(t) for t in IO_MANAGER_TYPES)}.',
        )
    manager = IO_MANAGER_TYPES[data_type](base_path=UPath(base_dir))

    # set custom file extension
    if file_extension:
        manager.extension = file_extension

    return manager
