"""Flow-level BitTorrent swarm simulator with a locality-aware tracker.

Subpackages:
    tracker    -- announce handling, locality cap, Round Robin, Partition Merging gate
    peer       -- client engine: choking, rarest-first, HAVE/interest, PM detection
    netsim     -- deterministic event loop and fluid bandwidth model
    scenario   -- experiment configuration builders and serialization
    presets    -- named experiment presets
    metrics    -- overhead / 95th-percentile / slowdown analytics
    estimator  -- Internet-scale inter-AS traffic estimation
    cli        -- run / sweep / estimate / validate commands
"""

__version__ = "0.1.0"

from .peer import Content, PeerConfig
from .scenario import ChurnPlan, ScenarioConfig, Topology
from .tracker import TrackerConfig

__all__ = [
    "Content",
    "PeerConfig",
    "TrackerConfig",
    "ScenarioConfig",
    "Topology",
    "ChurnPlan",
    "__version__",
]
