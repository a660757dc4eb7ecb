"""
Resilience utilities for stochastic solver stages.
Includes escalating retries for RANSAC-style consensus and stage timing.
"""

import time
import logging
import functools
import inspect
from typing import Callable, Any, Optional, Type, Tuple

from src.core.exceptions import NoConsensus
from src.core.seeding import spawn_rng

logger = logging.getLogger(__name__)


def retry_with_escalation(
    max_attempts: int = 3,
    budget_factor: float = 2.0,
    budget_arg: str = "iterations",
    seed_arg: str = "seed",
    exceptions: Tuple[Type[Exception], ...] = (NoConsensus,),
    on_retry: Optional[Callable[[Exception, int], None]] = None
):
    """
    Retry decorator that grows the iteration budget instead of sleeping.

    Each retry multiplies `budget_arg` by budget_factor and replaces `seed_arg`
    with a generator derived from the original seed and the attempt number, so
    a retried run is still reproducible.

    Args:
        max_attempts: Total attempts including the first
        budget_factor: Multiplier applied to the iteration budget per retry
        budget_arg: Keyword holding the iteration budget
        seed_arg: Keyword holding the seed (int, Generator or None)
        exceptions: Exception types that trigger a retry
        on_retry: Optional callback called on each retry

    Example:
        @retry_with_escalation(max_attempts=3)
        def robust_offsets(tdoa, case, iterations=500, seed=None):
            return ransac_offsets(tdoa, case, iterations=iterations, seed=seed)
    """
    def decorator(func: Callable) -> Callable:
        signature = inspect.signature(func)

        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            bound = signature.bind(*args, **kwargs)
            bound.apply_defaults()
            base_seed = bound.arguments.get(seed_arg)
            budget = bound.arguments.get(budget_arg)

            for attempt in range(1, max_attempts + 1):
                try:
                    return func(*bound.args, **bound.kwargs)
                except exceptions as e:
                    if attempt == max_attempts:
                        logger.error(f"{func.__name__} failed after {max_attempts} attempts: {e}")
                        raise

                    if budget is not None:
                        budget = int(round(budget * budget_factor))
                        bound.arguments[budget_arg] = budget
                    if isinstance(base_seed, int) or base_seed is None:
                        bound.arguments[seed_arg] = spawn_rng(base_seed, "retry", attempt)
                    logger.warning(
                        f"{func.__name__} failed (attempt {attempt}/{max_attempts}): {e}. "
                        f"Retrying with {budget_arg}={budget}"
                    )
                    if on_retry:
                        on_retry(e, attempt)

        return wrapper
    return decorator


def log_execution_time(func: Callable) -> Callable:
    """
    Decorator to log function execution time.

    Used on pipeline stages so slow steps show up in the run log.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> Any:
        start_time = time.time()
        try:
            result = func(*args, **kwargs)
            elapsed = time.time() - start_time
            logger.info(f"{func.__name__} completed in {elapsed:.2f}s")
            return result
        except Exception as e:
            elapsed = time.time() - start_time
            logger.error(f"{func.__name__} failed after {elapsed:.2f}s: {e}")
            raise

    return wrapper
