"""
Caching Service
In-memory LRU cache for edge->node input features, keyed by dataset
fingerprint and aggregator
"""

from cachetools import LRUCache
import logging
from typing import Any, Dict, Optional, Tuple

from services.graphstore import GraphDataset, NodeFeatures, build_node_features

logger = logging.getLogger(__name__)


class FeatureCache:
    """Cache of NodeFeatures so repeated runs on one dataset skip re-aggregation"""

    def __init__(self, maxsize: int = 16):
        """
        Initialize cache

        Args:
            maxsize: Maximum number of cached feature matrices
        """
        self.cache: LRUCache = LRUCache(maxsize=maxsize)
        self.hits = 0
        self.misses = 0
        logger.info(f"Initialized feature cache with maxsize={maxsize}")

    @staticmethod
    def key(g: GraphDataset, aggr: str) -> Tuple[str, str]:
        return g.fingerprint, aggr

    def get(self, g: GraphDataset, aggr: str) -> Optional[NodeFeatures]:
        value = self.cache.get(self.key(g, aggr))
        if value is not None:
            self.hits += 1
            logger.debug(f"Cache hit for {g.fingerprint}/{aggr}")
        else:
            self.misses += 1
            logger.debug(f"Cache miss for {g.fingerprint}/{aggr}")
        return value

    def features(self, g: GraphDataset, aggr: str, num_threads: int = None) -> NodeFeatures:
        """
        Cached build_node_features

        Args:
            g: dataset
            aggr: edge->node aggregator
            num_threads: worker cap passed to the builder on a miss

        Returns:
            NodeFeatures for (g, aggr)
        """
        value = self.get(g, aggr)
        if value is None:
            value = build_node_features(g, aggr, num_threads)
            self.cache[self.key(g, aggr)] = value
        return value

    def clear(self) -> None:
        """Clear all cached items"""
        self.cache.clear()
        logger.info("Feature cache cleared")

    def stats(self) -> Dict[str, Any]:
        """Get cache statistics"""
        return {
            'size': len(self.cache),
            'maxsize': self.cache.maxsize,
            'hits': self.hits,
            'misses': self.misses,
        }


_feature_cache: Optional[FeatureCache] = None


def get_feature_cache() -> FeatureCache:
    """Process-wide feature cache (created lazily)"""
    global _feature_cache
    if _feature_cache is None:
        _feature_cache = FeatureCache()
    return _feature_cache
