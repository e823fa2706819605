from .checkpoint import read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .gfd import FormatError, read_ensemble, read_field, read_gfd, write_gfd
from .tables import CsvImportError, import_csv_field, read_score_rows, write_score_table

__all__ = [
    "ConfigError", "CsvImportError", "FormatError", "RunConfig",
    "import_csv_field", "load_config", "parse_config", "read_checkpoint", "read_ensemble",
    "read_field", "read_gfd", "read_score_rows", "write_checkpoint", "write_gfd", "write_score_table",
]
