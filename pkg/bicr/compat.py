# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""This module handles import compatibility issues."""

from importlib.util import find_spec

if find_spec('simplejson'):
    import simplejson as json
else:
    import json


def json_dumps(payload, **kwargs):
    """Serialize ``payload`` the same way whichever json module is in use.

    Report hashes are computed over this output, so the separators and key
    ordering are pinned here rather than at every call site.
    """
    kwargs.setdefault('sort_keys', True)
    kwargs.setdefault('separators', (',', ':'))
    return json.dumps(payload, **kwargs)
