# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""Environment-override support module."""

import os
from collections.abc import MutableMapping


class OverrideMapping(MutableMapping):
    """
    A mapping of configuration values read from a document that first checks
    the process environment for the same key with a prefix (``BICR_`` by
    default) whenever reading a value. If a matching prefixed variable is
    found then its value is returned instead of the document's.

    By default, values read from the environment are cached so future
    lookups return the same value even if the environment changes mid-run.

    A prefixed environment variable has higher precedence than the value set
    in the document.
    """

    def __init__(self, env=None, env_prefix='BICR_', cache=True):
        """
        Initialize the mapping.

        :param env:
            where to read override variables from (defaults to
            ``os.environ``, which is never modified)
        :param env_prefix:
            prefix marking a variable as an override
        :param cache:
            cache override values once read (defaults to ``True``)
        """
        self.env = env if env is not None else os.environ
        self.env_prefix = env_prefix
        self.cache = cache
        self.values = {}
        self.overrides_cache = {}
        # deleted overrides of the process environment
        self.masked = set()

    def is_overridden(self, key):
        """Return whether ``key`` is served from the environment."""
        return key not in self.masked and self.env_prefix + key in self.env

    def __getitem__(self, key):
        if self.cache and key in self.overrides_cache:
            return self.overrides_cache[key]
        if self.is_overridden(key):
            value = self.env[self.env_prefix + key]
            if self.cache:
                self.overrides_cache[key] = value
            return value
        return self.values[key]

    def __iter__(self):
        """
        Iterate all document keys, also including the shortened key of every
        prefixed environment variable not already in the document.
        """
        yield from self.values
        for key in self.env:
            if key.startswith(self.env_prefix):
                short_key = key[len(self.env_prefix):]
                if short_key and short_key not in self.values \
                        and short_key not in self.masked:
                    yield short_key

    def __len__(self):
        """
        Return the number of keys, counting shortened override keys once.
        """
        return len(tuple(iter(self)))

    def __setitem__(self, key, value):
        self.values[key] = value

    def __delitem__(self, key):
        """
        Remove ``key`` from both layers. An override passed in through
        ``env`` is deleted from that mapping; one coming from the process
        environment is masked instead.
        """
        found = False
        if self.is_overridden(key):
            if self.env is os.environ:
                self.masked.add(key)
            else:
                del self.env[self.env_prefix + key]
            found = True
        self.overrides_cache.pop(key, None)
        if key in self.values:
            del self.values[key]
            found = True
        if not found:
            raise KeyError(key)
