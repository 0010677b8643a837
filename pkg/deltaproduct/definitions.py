from dagster import (
    AssetSelection,
    Definitions,
    EnvVar,
    define_asset_job,
    load_assets_from_modules,
)

from . import assets
from .io_managers import local_io_manager
from .resources import ExperimentResource

OUTPUT_DIR = EnvVar('DELTAPRODUCT_OUTPUT_DIR').get_value() or 'runs/dagster'

all_assets = load_assets_from_modules([assets])

# Job for training, evaluating and reporting one experiment
experiment_job = define_asset_job(name='experiment', selection=AssetSelection.all())

defs = Definitions(
    assets=all_assets,
    jobs=[experiment_job],
    resources={
        'experiment': ExperimentResource(
            config_path=EnvVar('DELTAPRODUCT_CONFIG').get_value(),
            output_dir=OUTPUT_DIR,
        ),
        'json_io_manager': local_io_manager.configured({'data_type': 'json', 'base_dir': OUTPUT_DIR}),
        'md_io_manager': local_io_manager.configured(
            {'data_type': 'text', 'file_extension': '.md', 'base_dir': OUTPUT_DIR}
        ),
        'csv_io_manager': local_io_manager.configured({'data_type': 'csv', 'base_dir': OUTPUT_DIR}),
        'checkpoint_io_manager': local_io_manager.configured({'data_type': 'checkpoint', 'base_dir': OUTPUT_DIR}),
    },
)
