"""Embeddable chunked array database with associative arrays and an ingest benchmark."""

from arraydb.assoc import AssocArray, DbTable, KeySelector, neighbors, read_triples, write_triples
from arraydb.chunkstore import ArrayVersion, Chunk, ChunkId, ChunkStore
from arraydb.engine import ArrayHandle, CellBox, Cells, Engine, EngineConfig, ShardMap
from arraydb.errors import (
    ArrayDBError,
    ConflictError,
    CorruptionError,
    IngestAborted,
    MeasurementError,
    NotFoundError,
    OutOfBoundsError,
    SchemaParseError,
    StorageWriteError,
    ValidationError,
    VersionError,
)
from arraydb.ingest import IngestConfig, IngestReport, measure, plan, run_ingest
from arraydb.schema import (
    ArraySchema,
    AttributeSpec,
    DimensionSpec,
    chunk_of,
    format_schema,
    halo_chunks,
    parse_schema,
)

__version__ = "0.1.0"
