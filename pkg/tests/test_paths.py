# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import os
import sys

import pytest

from bicr import ImproperlyConfigured, Path


@pytest.mark.skipif(sys.platform == 'win32', reason='POSIX paths')
def test_str():
    root = Path('/home')
    assert str(root) == '/home'
    assert str(root()) == '/home'
    assert str(root('dev')) == '/home/dev'


def test_path_class():
    root_path = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
    root = Path(os.path.dirname(__file__), '..')

    assert root() == root_path

    web = root.path('public')
    assert web() == os.path.join(root_path, 'public')
    assert web('css') == os.path.join(root_path, 'public', 'css')


@pytest.mark.skipif(sys.platform == 'win32', reason='POSIX paths')
def test_repr():
    assert repr(Path('/home')) == '<Path:/home>'


def test_comparison():
    assert Path('/home') == Path('/home')
    assert Path('/home') == Path('/home/dev', '..')
    assert Path('/home') != Path('/home/dev')
    assert Path('/home') != '/usr'
    assert Path('/home/foo/').__fspath__() == str(Path('/home/foo/'))
    assert os.fspath(Path('/home')) == str(Path('/home'))


def test_required_path(tmp_path):
    root = Path(tmp_path)
    with pytest.raises(ImproperlyConfigured) as excinfo:
        root('dev', 'not_existing_dir', required=True)
    assert 'Create required path:' in str(excinfo.value)

    with pytest.raises(ImproperlyConfigured):
        Path(tmp_path / 'not' / 'existing', required=True)


def test_ensure_creates_directory(tmp_path):
    out = Path(tmp_path, 'runs', 'a').ensure()
    assert os.path.isdir(out())
    assert out.ensure() == out


def test_file_creates_parent(tmp_path):
    out = Path(tmp_path, 'runs')
    with out.file(os.path.join('rfl', 'report.json'), 'w') as f:
        f.write('{}')
    assert os.path.isfile(out('rfl', 'report.json'))


@pytest.mark.skipif(sys.platform == 'win32', reason='POSIX paths')
def test_complex_manipulation():
    root = Path('/home')
    public = root.path('public')
    assets, scripts = public.path('assets'), public.path('assets', 'scripts')

    assert repr(public) == '<Path:/home/public>'
    assert public() == '/home/public'
    assert public('styles') == '/home/public/styles'
    assert assets() == '/home/public/assets'
    assert scripts() == '/home/public/assets/scripts'
