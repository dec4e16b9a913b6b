"""Plan-driven dual-agent orchestration for retrieval-augmented multi-hop QA.

The package bundles the pieces that surround the two language agents (a
planning Reasoner and a relevance-judging Purifier): the trajectory tag
grammar, the episode state machine, the reward kernel, the training-data
synthesis pipeline, the evaluation harness, and a CLI. Agent and retriever
dependencies sit behind small wire contracts so every path can run against
scripted components.
"""

__version__ = "0.1.0"
