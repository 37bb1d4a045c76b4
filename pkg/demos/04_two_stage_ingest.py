"""Stage a volume through several clients, merge, verify and report rates."""

import tempfile

from arraydb import Engine, EngineConfig, IngestConfig, parse_schema, run_ingest
from arraydb.ingest import cleanup, verify
from arraydb.volume import SyntheticVolume

src = SyntheticVolume((128, 128, 16), seed=1)
_, schema = parse_schema("vol3d<val:uint8>[row=1:128,128,0,col=1:128,128,0,slice=1:16,1,0]")

with tempfile.TemporaryDirectory() as root, Engine(EngineConfig(1, 4, root)) as e:
    for clients in (1, 2, 4):
        target, report = run_ingest(e, IngestConfig(f"vol{clients}", schema, clients), src)
        print(f"{clients} client(s): stage {report.stage_seconds:.3f}s merge {report.merge_seconds:.3f}s "
              f"rate_stage {report.rate_stage:,.0f} cells/s, fidelity {verify(e, target, src)}")
        cleanup(e, f"vol{clients}", keep_target=True)
    print("arrays:", e.arrays())
