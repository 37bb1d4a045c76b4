"""String-keyed sparse arrays: indexing, algebra and a BFS step."""

from arraydb import AssocArray, neighbors

A = AssocArray.from_triples([
    ("alice", "bob", 1), ("alice", "carl", 1), ("bob", "carl", 1),
    ("carl", "dave", 1), ("dave", "alice", 1),
])
print("rows:", A.rows)
print("al* rows:", A["al*", :].to_triples())
print("alice : carl rows:", A["alice : carl", :].rows)
print("first two rows:", A[range(1, 3), :].rows)

two_hop = A @ A
print("two-hop paths:", two_hop.to_triples())

frontier, seen = {"alice"}, {"alice"}
while frontier:
    frontier = neighbors(A, frontier) - seen
    seen |= frontier
    print("frontier:", sorted(frontier))
