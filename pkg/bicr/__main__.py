# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import sys

from .cli import main

sys.exit(main())
