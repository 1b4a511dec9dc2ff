"""Two-step radiology-report summarization with dual extractor agents.

Modules: corpus (ingest/filter/normalize/synthetic data), rouge (metrics),
labels (heuristic supervision), nn (shared neural blocks), extractor
(dual pointer networks + switch), abstractor (pointer-generator rewriter),
dimac (multi-agent actor-critic RL), pipeline/cli (orchestration).
"""

__version__ = "0.1.0"
