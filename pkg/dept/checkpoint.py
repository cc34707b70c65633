# This file is part of DePT.
#
# DePT is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# DePT is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with DePT.  If not, see <http://www.gnu.org/licenses/>.

import json
import logging
import os

import numpy as np

from dept.encoder import EncoderConfig, EncoderError, EncoderParams

CHECKPOINT_VERSION = 1
_META_KEY = '__meta__'


class CheckpointError(Exception):
    pass


'''
Function:   save_checkpoint
Parameter:  path   = target .npz file
            params = EncoderParams (priors included)
            meta   = dict with ablation flags, scenario, ...

Description: Writes every Parameter under its name plus a JSON record
             holding the format version and the encoder configuration.
'''
def save_checkpoint(path, params, meta=None):
    record = dict(meta or {})
    record['version'] = CHECKPOINT_VERSION
    record['encoder'] = params.config.to_dict()
    record['mean_speed'] = params.config.mean_speed
    arrays = {name: p.value for name, p in params.named_parameters().items()}
    arrays[_META_KEY] = np.array(json.dumps(record, sort_keys=True))

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # np.savez appends .npz to names without it
    with open(path, 'wb') as fd:
        np.savez(fd, **arrays)
    logging.info('* wrote checkpoint %s (%d parameters)', path, len(arrays) - 1)
    return path


def read_checkpoint_meta(path):
    try:
        with np.load(path, allow_pickle=False) as archive:
            if _META_KEY not in archive:
                raise CheckpointError('checkpoint {}: no metadata record'.format(path))
            meta = json.loads(str(archive[_META_KEY]))
    except (OSError, ValueError) as e:
        raise CheckpointError('checkpoint {}: cannot read ({})'.format(path, e))
    if meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError('checkpoint {}: version {} not supported (expected {})'
                              .format(path, meta.get('version'), CHECKPOINT_VERSION))
    return meta


def load_checkpoint(path, graph):
    meta = read_checkpoint_meta(path)
    try:
        config = EncoderConfig.from_dict(meta['encoder'])
        params = EncoderParams(config, graph)
    except (KeyError, EncoderError) as e:
        raise CheckpointError('checkpoint {}: bad encoder record ({})'.format(path, e))

    with np.load(path, allow_pickle=False) as archive:
        names = set(archive.files) - {_META_KEY}
        expected = params.named_parameters()
        if names != set(expected):
            missing = sorted(set(expected) - names)
            extra = sorted(names - set(expected))
            raise CheckpointError('checkpoint {}: parameter mismatch, missing {} extra {}'
                                  .format(path, missing[:3], extra[:3]))
        for name, p in expected.items():
            value = archive[name]
            if value.shape != p.shape:
                raise CheckpointError('checkpoint {}: {} has shape {}, expected {}'
                                      .format(path, name, value.shape, p.shape))
            p.assign(value)
    logging.info('* loaded checkpoint %s', path)
    return params, meta
