# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Typed, scheme-based lookups over experiment configuration documents.

A configuration document is a plain ``KEY=value`` file (the familiar
dotenv dialect) whose keys are nested with a double underscore, e.g.
``STREAM__STAGES=5``. Values are read through :class:`Env`, which casts
them according to a scheme, remembers the line every key came from and
lets ``BICR_``-prefixed environment variables override the file.
"""

import logging
import os
import re
from typing import Dict, Tuple

from .exceptions import ImproperlyConfigured
from .override_mapping import OverrideMapping

OPENABLE = (str, os.PathLike)
logger = logging.getLogger(__name__)


class NoValue:
    """Represent of no value object."""

    def __repr__(self):
        return f'<{self.__class__.__name__}>'


class Env:
    """Provide scheme-based lookups of configuration values so that each
    caller doesn't have to pass in ``cast`` and ``default`` parameters.

    Usage:::

        from bicr.settings import Env

        env = Env(
            # set casting, default value
            STREAM__STAGES=(int, 5),
            MODE=(str, 'rfl'),
        )

        # Take values from an experiment document
        env.read_env('experiment.env', parse_comments=True)

        # 5 unless the document or BICR_STREAM__STAGES says otherwise
        stages = env('STREAM__STAGES')
    """

    ENVIRON = os.environ
    NOTSET = NoValue()
    BOOLEAN_TRUE_STRINGS = ('true', 'on', 'ok', 'y', 'yes', '1')
    NONE_STRINGS = ('', 'none', 'null')

    def __init__(self, environ=None, **scheme):
        self.scheme = scheme
        if environ is not None:
            self.ENVIRON = environ
        self.origins: Dict[str, Tuple[str, int]] = {}

    def __call__(self, var, cast=None, default=NOTSET):
        return self.get_value(var, cast=cast, default=default)

    def where(self, var) -> str:
        """Return ``path:line`` for a key read from a document.

        Overridden keys name their environment variable; keys that fell back
        to a default are reported by name only.
        """
        if isinstance(self.ENVIRON, OverrideMapping) \
                and self.ENVIRON.is_overridden(var):
            return f'{self.ENVIRON.env_prefix}{var} (environment)'
        origin = self.origins.get(var)
        if origin is None:
            return var
        return f'{origin[0]}:{origin[1]}'

    def get_value(self, var, cast=None, default=NOTSET):
        """Return value for given configuration key.

        :param str var:
            Name of the key.
        :param collections.abc.Callable or None cast:
            Type to cast return value as.
        :param default:
             If var not present in the document, return this instead.
        :returns: Value from the document or default (if set).
        """

        logger.debug(
            "get %r casted as %r with default type %s",
            var, cast, type(default).__name__)

        if var in self.scheme:
            var_cast, var_default = self.scheme[var]
            cast = cast or var_cast
            if default is self.NOTSET:
                default = var_default

        try:
            value = self.ENVIRON[var]
        except KeyError as exc:
            if default is self.NOTSET:
                error_msg = f'Set the {var} configuration key'
                raise ImproperlyConfigured(error_msg) from exc
            return default

        try:
            return self.parse_value(value, cast)
        except (TypeError, ValueError) as exc:
            raise ImproperlyConfigured(
                f'{self.where(var)}: cannot read {var}={value!r}: {exc}'
            ) from exc

    @classmethod
    def parse_value(cls, value, cast):
        """Parse and cast provided value

        :param value: Stringed value.
        :param cast: Type to cast return value as.

        :returns: Casted value
        """
        if cast is None or not isinstance(value, str):
            return value
        if cast is bool:
            try:
                value = int(value) != 0
            except ValueError:
                value = value.lower().strip() in cls.BOOLEAN_TRUE_STRINGS
        elif cast is float:
            value = float(value.strip())
        elif cast is int:
            value = int(value.strip())
        else:
            value = cast(value)
        return value

    @classmethod
    def optional(cls, cast):
        """Wrap ``cast`` so that ``none``/``null``/empty read as ``None``."""

        def parse(value):
            if value is None or (isinstance(value, str)
                                 and value.strip().lower()
                                 in cls.NONE_STRINGS):
                return None
            return cls.parse_value(value, cast)

        parse.__name__ = f'optional_{getattr(cast, "__name__", "value")}'
        return parse

    def read_env(self, env_file, overwrite=False, parse_comments=False,
                 strict=False, encoding='utf8', **overrides):
        r"""Read a configuration document into this reader's mapping.

        Values already present in the mapping take precedence and are NOT
        overwritten by the file content. ``overwrite=True`` will force an
        overwrite.

        :param env_file: The path (or open file) of the document.
        :param overwrite: ``overwrite=True`` will force an overwrite of
            existing values.
        :param parse_comments: Determines whether to recognize and ignore
           inline comments in the document. Default is False.
        :param strict: Raise :class:`ImproperlyConfigured` naming the
           offending line instead of logging invalid lines.
        :param encoding: The encoding to use when reading the document.
        :param \**overrides: Any additional keyword arguments provided
            directly to read_env will be added to the mapping.
        """
        try:
            if isinstance(env_file, OPENABLE):
                with open(str(env_file), encoding=encoding) as f:
                    content = f.read()
                source = str(env_file)
            else:
                with env_file as f:
                    content = f.read()
                source = getattr(env_file, 'name', '<stream>')
        except OSError as exc:
            raise ImproperlyConfigured(
                f"{env_file}: cannot read configuration: {exc}") from exc

        logger.debug('Read configuration from: %s', source)

        def _keep_escaped_format_characters(match):
            """Keep escaped newline/tabs in quoted strings"""
            escaped_char = match.group(1)
            if escaped_char in 'rnt':
                return '\\' + escaped_char
            return escaped_char

        values = {}
        for lineno, line in enumerate(content.splitlines(), start=1):
            stripped = line.strip()
            m1 = re.match(r'\A(?:export )?([A-Za-z_0-9]+)\s*=\s*(.*)\Z',
                          stripped)
            if m1:
                key, val = m1.group(1), m1.group(2)

                if not parse_comments:
                    m2 = re.match(r"\A'(.*)'\Z", val)
                    if m2:
                        val = m2.group(1)
                else:
                    # Something like ['val'  # comment] becomes ['val'].
                    m2 = re.match(r"\A\s*'(?<!\\)(.*)'\s*(#.*\s*)?\Z", val)
                    if m2:
                        val = m2.group(1)
                    else:
                        m2a = re.match(r"\A(.*?)\s*(#.*\s*)?\Z", val)
                        if m2a:
                            val = m2a.group(1)

                m3 = re.match(r'\A"(.*)"\Z', val)
                if m3:
                    val = re.sub(r'\\(.)', _keep_escaped_format_characters,
                                 m3.group(1))

                if key in values and strict:
                    raise ImproperlyConfigured(
                        f'{source}:{lineno}: duplicate key {key}')
                values[key] = str(val)
                self.origins[key] = (source, lineno)
            elif not stripped or stripped.startswith('#'):
                # ignore warnings for empty line-breaks or comments
                pass
            elif strict:
                raise ImproperlyConfigured(
                    f'{source}:{lineno}: invalid line: {line!r}')
            else:
                logger.warning('Invalid line %s:%d: %s', source, lineno, line)

        values.update({k: str(v) for k, v in overrides.items()})

        for key, value in values.items():
            if overwrite:
                self.ENVIRON[key] = value
            else:
                self.ENVIRON.setdefault(key, value)
        return values


class ConfigEnv(Env):
    """
    An :class:`Env` whose values come from a document with environment
    overrides on top.

    ``BICR_SEED=7`` in the process environment wins over ``SEED=3`` in the
    document. Use as a drop-in replacement for :class:`Env`:

    .. code-block:: python

        env = ConfigEnv(**SCHEME)
        env.read_env('experiment.env', strict=True)
    """

    def __init__(self, environ=None, env_prefix='BICR_', **scheme):
        super().__init__(**scheme)
        self.ENVIRON = OverrideMapping(
            env=environ if environ is not None else os.environ,
            env_prefix=env_prefix,
        )


class Path:
    """Output-directory handle: every file a run writes resolves here."""

    def __init__(self, start='', *paths, **kwargs):
        self.__root__ = self._absolute_join(start, *paths, **kwargs)

    def __call__(self, *paths, **kwargs):
        """Retrieve the absolute path, with appended paths

        :param paths: List of sub path of the directory
        :param kwargs: required=False
        """
        return self._absolute_join(self.__root__, *paths, **kwargs)

    def path(self, *paths, **kwargs):
        """Create new Path below this directory.

        :param paths: List of sub paths
        :param kwargs: required=False
        :rtype: Path
        """
        return self.__class__(self.__root__, *paths, **kwargs)

    def file(self, name, *args, **kwargs):
        r"""Open a file, creating its parent directory first.

        :param str name: Filename appended to this directory
        :param \*args: ``*args`` passed to :py:func:`open`
        :param \**kwargs: ``**kwargs`` passed to :py:func:`open`
        :rtype: typing.IO[typing.Any]
        """
        target = self(name)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        # pylint: disable=unspecified-encoding
        return open(target, *args, **kwargs)

    def ensure(self):
        """Create the directory if missing and return ``self``."""
        os.makedirs(self.__root__, exist_ok=True)
        return self

    def __eq__(self, other):
        if isinstance(other, Path):
            return self.__root__ == other.__root__
        return self.__root__ == other

    def __repr__(self):
        return f'<Path:{self.__root__}>'

    def __str__(self):
        return self.__root__

    def __fspath__(self):
        return self.__str__()

    @staticmethod
    def _absolute_join(base, *paths, **kwargs):
        absolute_path = os.path.abspath(os.path.join(base, *paths))
        if kwargs.get('required', False) and not os.path.exists(absolute_path):
            raise ImproperlyConfigured(
                f'Create required path: {absolute_path}'
            )
        return absolute_path
