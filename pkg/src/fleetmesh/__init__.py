"""Deterministic vehicle-edge-cloud runtime: a pub/sub+query data fabric
over a simulated WAN, device twins with OTA lifecycle management, a
heterogeneous DAG scheduler, and a scenario-replay harness."""

__version__ = "0.1.0"
