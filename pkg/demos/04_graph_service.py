"""Serve neighborhoods and features over TCP and check them against local calls.

Run: python demos/04_graph_service.py
"""

from hetrep.sampler import SamplingConfig, sample_neighborhood
from hetrep.service import GraphClient, GraphServer
from hetrep.world import generate_synthetic_world

world = generate_synthetic_world(clusters=2, pins_per_cluster=50, boards_per_cluster=10, users=0, seed=3)
g, store = world.graph(), world.store()
cfg = SamplingConfig.parse("PB:Pin=4,Board=2;PP:Pin=4", world.schema, budget=1000)

server = GraphServer(g, store).start()
print("listening on %s:%d" % server.address)
try:
    with GraphClient(server.address, timeout=5.0) as client:
        n, schema = client.health()
        print(f"server holds {n} nodes; schema fingerprint matches: {schema.canonical() == world.schema.canonical()}")
        node = g.nodes()[0]
        nb, feats = client.sample_and_fetch(node, cfg)
        print(f"{node}: {len(nb)} neighbors, {sum(f is not None for f in feats)} feature records")
        print("identical to the in-process sampler:", nb == sample_neighborhood(g, node, cfg))
finally:
    server.stop()
