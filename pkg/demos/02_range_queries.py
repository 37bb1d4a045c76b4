"""Range selection reads only the chunks a box touches."""

import tempfile

import numpy as np

from arraydb import Engine, EngineConfig

with tempfile.TemporaryDirectory() as root, Engine(EngineConfig(1, 4, root)) as e:
    e.create_array("grid", "grid<v:int64>[i=1:1000,100,0,j=1:1000,100,0]")
    rng = np.random.default_rng(0)
    coords = rng.integers(1, 1001, (50_000, 2))
    e.insert("grid", coords, rng.integers(0, 100, len(coords)))

    for box in [((1, 1), (1000, 1000)), ((150, 150), (260, 240)), ((500, 500), (500, 500))]:
        before = e.store.chunk_reads
        cells = e.between("grid", box)
        print(f"between{box}: {len(cells):6d} cells, {e.store.chunk_reads - before:3d} chunk reads")

    patch = np.array([(i, j) for i in range(10, 13) for j in range(11, 14)])
    e.insert("grid", patch, np.arange(1, 10) * 111)
    block, present = e.fetch_dense("grid", ((10, 10), (14, 13)))
    print(f"dense 5x4 block at (10, 10): {int(present.sum())} cells present")
    print(np.where(present, block, -1))
