"""Tamper-evident audit-log storage on a simulated permissioned blockchain."""

from .bench import Oracle
from .ledger import Block, Chain, Ledger, Transaction, verify_chain
from .log_model import LogRecord, parse_log_file
from .net_sim import Network, NetworkConfig
from .query_engine import EngineConfig, Query, QueryEngine, QueryResult, ScanStats
from .streams import StreamNode

__all__ = [
    "Block", "Chain", "EngineConfig", "Ledger", "LogRecord", "Network", "NetworkConfig", "Oracle",
    "Query", "QueryEngine", "QueryResult", "ScanStats", "StreamNode", "Transaction",
    "parse_log_file", "verify_chain",
]
