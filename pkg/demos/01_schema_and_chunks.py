"""Parse a schema, see where coordinates land, and inspect a stored chunk."""

import tempfile

from arraydb import Engine, EngineConfig, chunk_of, format_schema, halo_chunks, parse_schema

name, schema = parse_schema("img<val:uint8>[x=1:100,20,4,y=1:60,30,0]")
print(format_schema(schema, name))
print("chunk grid:", schema.chunk_grid)

x = schema.dimensions[0]
for coord in (1, 20, 21, 23, 95):
    print(f"x={coord:3d} -> chunk {chunk_of(x, coord)}, also in halo of {sorted(halo_chunks(x, coord))}")

with tempfile.TemporaryDirectory() as root, Engine(EngineConfig(1, 2, root)) as e:
    e.create_array(name, schema)
    v = e.insert(name, [[19, 5], [21, 5], [95, 40]], [7, 8, 9])
    for ords, entry in sorted(v.manifest.items()):
        chunk = e.store.read_chunk(name, v, ords, include_halo=True)
        print(f"chunk {ords}: {chunk.cell_count} cells, {chunk.halo_count} halo, "
              f"{chunk.encoding_name} file {entry.path}")
