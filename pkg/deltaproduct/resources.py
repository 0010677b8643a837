import json

from dagster import ConfigurableResource, get_dagster_logger

from .config import RunSpec, config_hash, load_run_spec


class ExperimentResource(ConfigurableResource):
    """Custom Dagster resource resolving the run configuration of an experiment.

    Args:
        - config_path (str | None, optional):
            TOML or JSON run configuration. If no path is set, the preset (or the built-in defaults) is used.
        - preset (str | None, optional):
            Named preset from ``config.PRESETS`` applied below the config file.
        - output_dir (str | None, optional):
            Overrides ``output_dir`` of the configuration.
        - seed (int | None, optional):
            Overrides ``train.seed`` of the configuration.
        - overrides (list[str], optional):
            Dotted-key overrides such as ``model.n_h=3``, applied last.
    """

    config_path: str | None = None
    """TOML or JSON run configuration."""

    preset: str | None = None
    """Named preset applied below the config file."""

    output_dir: str | None = None
    """Directory every artifact of the run is written to."""

    seed: int | None = None
    """Training seed; takes precedence over the configuration."""

    overrides: list[str] = []
    """Dotted-key overrides, applied after the config file."""

    def run_spec(self) -> RunSpec:
        """Loads and validates the configuration with all overrides applied.

        Returns:
            - RunSpec: Validated run configuration.

        Raises:
            - ConfigNotFoundError: When ``config_path`` does not exist.
            - ContractViolationError: When the configuration does not validate.
        """
        logger = get_dagster_logger()
        overrides = list(self.overrides)
        if self.output_dir:
            overrides.append(f'output_dir={json.dumps(self.output_dir)}')
        if self.seed is not None:
            overrides.append(f'train.seed={self.seed}')
        spec = load_run_spec(self.config_path, overrides=overrides, preset=self.preset)
        logger.info(f'Resolved run configuration {config_hash(spec)[:12]} (output_dir={spec.output_dir})')
        return spec
