# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""The top-level module for the bicr package.

This module tracks the version of the package as well as the base
package info used by various functions within bicr.

bicr keeps a retrieval gallery usable across a sequence of training stages
without re-extracting historical features: a pair of transfer networks
moves stored vectors from the previous feature space into the current one,
and a knowledge-change coefficient fuses both models and both feature sets.
"""

from .exceptions import *
from .settings import Env, NoValue, Path


__copyright__ = 'Copyright (C) 2026 the bicr contributors'
"""The copyright notice of the package."""

__version__ = '0.4.0'
"""The version of the package."""

__license__ = 'MIT'
"""The license of the package."""

__author__ = 'the bicr contributors'
"""The author of the package."""

__author_email__ = 'bicr-dev@users.noreply.github.com'
"""The email of the author of the package."""

__maintainer__ = 'the bicr contributors'
"""The maintainer of the package."""

__maintainer_email__ = 'bicr-dev@users.noreply.github.com'
"""The email of the maintainer of the package."""

__url__ = 'https://bicr.readthedocs.org'
"""The URL of the package."""

# pylint: disable=line-too-long
__description__ = 'Re-indexing-free lifelong retrieval: bidirectional feature transfer, compatible distillation and dynamic feature fusion for versioned embedding galleries.'  # noqa: E501
"""The description of the package."""
