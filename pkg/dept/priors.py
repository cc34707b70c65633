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

import logging

import numpy as np

from dept.numerics import Adam, OptimizerConfig, Parameter, Tensor, mse, no_grad, scatter

# free-flow speed 10 m/s times a 10 s decision interval
DEFAULT_MEAN_SPEED = 100.0


class PriorError(Exception):
    pass


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class PriorParams:

    '''
    Class:       PriorParams
    Parameter:   num_nodes       = |V|, size of both LUTs
                 d_model         = token embedding width seen by the speed nets
                 t_max           = number of lags
                 mean_speed      = average flow speed in meters per decision step
                 hidden          = width of the gamma/sigma networks
                 deviation_range = half width of the normalized fitting domain

    Description: Learnable prior of one attention head in one encoder block:
                 ConeDecay net, TimeDecay net, attention LUT, speed LUT and the
                 origin/destination speed nets. Freshly built priors are not
                 fitted; see prefit_prior_params.
    '''
    def __init__(self, num_nodes, d_model, t_max, mean_speed=DEFAULT_MEAN_SPEED, hidden=16,
                 deviation_range=3.0, rng=None, name='prior', lut_std=0.02):
        if mean_speed <= 0:
            raise PriorError('mean speed must be positive, got {}'.format(mean_speed))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.num_nodes = num_nodes
        self.d_model = d_model
        self.t_max = t_max
        self.hidden = hidden
        self.mean_speed = float(mean_speed)
        self.deviation_range = float(deviation_range)
        # epsilon / deviation_unit and delta / lag_unit are the network inputs
        self.deviation_unit = self.mean_speed * t_max
        self.lag_unit = t_max / self.deviation_range

        self.gamma_params = self._scalar_net_params('gamma', rng)
        self.sigma_params = self._scalar_net_params('sigma', rng)
        self.attn_lut = Parameter(rng.normal(0.0, lut_std, (num_nodes, num_nodes)),
                                  name + '.attn_lut')
        self.speed_lut = Parameter(rng.normal(0.0, lut_std, (num_nodes, num_nodes)),
                                   name + '.speed_lut')
        scale = 1.0 / np.sqrt(d_model)
        self.nu_o_w = Parameter(rng.normal(0.0, scale, (d_model, 1)), name + '.nu_o.w')
        self.nu_o_b = Parameter(np.zeros(1), name + '.nu_o.b')
        self.nu_d_w = Parameter(rng.normal(0.0, scale, (d_model, 1)), name + '.nu_d.w')
        self.nu_d_b = Parameter(np.zeros(1), name + '.nu_d.b')

    def _scalar_net_params(self, which, rng):
        h = self.hidden
        prefix = '{}.{}'.format(self.name, which)
        return {
            'w1': Parameter(rng.normal(0.0, 1.0, (1, h)), prefix + '.w1'),
            'b1': Parameter(rng.normal(0.0, 1.0, h), prefix + '.b1'),
            'w2': Parameter(rng.normal(0.0, 1.0 / np.sqrt(h), (h, h)), prefix + '.w2'),
            'b2': Parameter(np.zeros(h), prefix + '.b2'),
            'w3': Parameter(rng.normal(0.0, 1.0 / np.sqrt(h), (h, 1)), prefix + '.w3'),
            'b3': Parameter(np.zeros(1), prefix + '.b3'),
        }

    def parameters(self):
        params = list(self.gamma_params.values()) + list(self.sigma_params.values())
        params += [self.attn_lut, self.speed_lut,
                   self.nu_o_w, self.nu_o_b, self.nu_d_w, self.nu_d_b]
        return params

    def _hidden(self, x, net):
        x = _lift(x)
        h = x.reshape(-1, 1)
        h = (h @ net['w1'] + net['b1']).gelu()
        return (h @ net['w2'] + net['b2']).gelu()

    def _scalar_net(self, x, net):
        x = _lift(x)
        out = self._hidden(x, net) @ net['w3'] + net['b3']
        return out.reshape(x.shape)

    def gamma(self, x):
        return self._scalar_net(x, self.gamma_params)

    def sigma(self, x):
        return self._scalar_net(x, self.sigma_params)

    def _speed_net(self, phi, weight, bias):
        phi = _lift(phi)
        flat = phi.reshape(-1, phi.shape[-1]) @ weight
        return flat.reshape(phi.shape[:-1]) + bias.reshape(())

    def nu_o(self, phi):
        return self._speed_net(phi, self.nu_o_w, self.nu_o_b)

    def nu_d(self, phi):
        return self._speed_net(phi, self.nu_d_w, self.nu_d_b)


def init_prior_params(num_nodes, d_model, t_max, mean_speed=DEFAULT_MEAN_SPEED, hidden=16,
                      deviation_range=3.0, rng=None, name='prior'):
    return PriorParams(num_nodes, d_model, t_max, mean_speed, hidden, deviation_range, rng, name)


'''
Function:   causal_deviation
Parameter:  tau, rho = query and key lags (scalars or broadcastable arrays)
            speed    = propagation speed in meters per step (number, array or Tensor)
            distance = node distance in meters

Description: epsilon = (rho - tau) * speed - distance. The key token is the
             older one; epsilon = 0 means a flow at 'speed' exactly connects
             the two tokens.
'''
def causal_deviation(tau, rho, speed, distance):
    elapsed = np.asarray(rho, dtype=np.float64) - np.asarray(tau, dtype=np.float64)
    if isinstance(speed, Tensor):
        return speed * elapsed - np.asarray(distance, dtype=np.float64)
    if np.any(np.asarray(speed) <= 0):
        raise PriorError('causal_deviation: speed must be positive, got {}'.format(speed))
    result = elapsed * speed - np.asarray(distance, dtype=np.float64)
    return float(result) if np.ndim(result) == 0 else result


def estimate_speed(phi_query, phi_key, i, j, prior):
    raw = prior.nu_o(phi_key) + prior.nu_d(phi_query) + prior.speed_lut.gather(i, j)
    return (raw / 3.0).softplus()


def cone_decay(epsilon, prior):
    return prior.gamma(_lift(epsilon) / prior.deviation_unit)


def time_decay(delta, prior):
    return prior.sigma(_lift(delta) / prior.lag_unit)


'''
Function:   prior_components
Parameter:  phi_query, phi_key = embeddings, broadcastable over the pair grid
            i, j, tau, rho     = node ids and lags of query and key
            use_cone           = False drops the ConeDecay part
            visible            = optional bool array over the pair grid; the
                                 ConeDecay net only runs on visible pairs

Description: Returns the ConeDecay, TimeDecay and LUT parts of the prior
             separately. Pairs with rho < tau are evaluated at zero elapsed
             time and hidden pairs get a zero cone; the caller masks both.
'''
def prior_components(phi_query, phi_key, i, j, tau, rho, prior, graph, use_cone=True, visible=None):
    tau = np.asarray(tau)
    rho = np.maximum(np.asarray(rho), tau)
    delta = rho - tau
    lags, inverse = np.unique(delta, return_inverse=True)
    time = time_decay(lags.astype(np.float64), prior).take(inverse.reshape(delta.shape), axis=0)
    lut = prior.attn_lut.gather(i, j)
    cone = None
    if use_cone:
        speed = estimate_speed(phi_query, phi_key, i, j, prior)
        distance = graph.distances[np.asarray(i), np.asarray(j)]
        epsilon = causal_deviation(tau, rho, speed, distance)
        if visible is None:
            cone = cone_decay(epsilon, prior)
        else:
            keep = np.broadcast_to(np.asarray(visible, dtype=bool), epsilon.shape)
            cone = scatter(cone_decay(epsilon.select(keep), prior), keep)
    return {'cone': cone, 'time': time, 'lut': lut}


def prior_score(phi_query, phi_key, i, j, tau, rho, prior, graph, use_cone=True, visible=None):
    parts = prior_components(phi_query, phi_key, i, j, tau, rho, prior, graph, use_cone, visible)
    score = parts['time'] + parts['lut']
    if parts['cone'] is not None:
        score = parts['cone'] + score
    return score


class PrefitConfig:

    def __init__(self, mean_speed=DEFAULT_MEAN_SPEED, curvature=0.5, deviation_range=3.0,
                 label_noise=0.1, fit_iterations=1500, learning_rate=1e-2, grid_points=241,
                 tolerance=1e-3, embedding_samples=512):
        if mean_speed <= 0:
            raise PriorError('prefit: mean speed must be positive, got {}'.format(mean_speed))
        if curvature <= 0:
            raise PriorError('prefit: curvature must be positive, got {}'.format(curvature))
        if deviation_range <= 0:
            raise PriorError('prefit: deviation range must be positive, got {}'.format(deviation_range))
        self.mean_speed = float(mean_speed)
        self.curvature = float(curvature)
        self.deviation_range = float(deviation_range)
        self.label_noise = float(label_noise)
        self.fit_iterations = int(fit_iterations)
        self.learning_rate = float(learning_rate)
        self.grid_points = int(grid_points)
        self.tolerance = float(tolerance)
        self.embedding_samples = int(embedding_samples)


class PrefitReport:

    def __init__(self, name, gamma_mse, sigma_mse, nu_o_mean, nu_d_mean, tolerance):
        self.name = name
        self.gamma_mse = gamma_mse
        self.sigma_mse = sigma_mse
        self.nu_o_mean = nu_o_mean
        self.nu_d_mean = nu_d_mean
        self.converged = gamma_mse < tolerance and sigma_mse < tolerance


def _fit_scalar_net(prior, net, config):
    r = config.deviation_range
    k = config.curvature
    x = np.linspace(-r, r, config.grid_points)
    y = -k * x ** 2
    params = list(net.values())
    optimizer = Adam(params, OptimizerConfig(learning_rate=config.learning_rate))
    for _ in range(config.fit_iterations):
        loss = mse(prior._scalar_net(x, net), y)
        loss.backward()
        optimizer.step()

    # the output layer is linear in the hidden features: solve it exactly
    with no_grad():
        hidden = prior._hidden(x, net).value
    design = np.hstack([hidden, np.ones((hidden.shape[0], 1))])
    solution = np.linalg.lstsq(design, y, rcond=None)[0]
    net['w3'].assign(solution[:-1].reshape(-1, 1))
    net['b3'].assign(solution[-1:])

    with no_grad():
        residual = prior._scalar_net(x, net).value - y
    return float(np.mean(residual ** 2) / (k ** 2 * r ** 4))


def _fit_speed_net(weight, bias, config, rng):
    d_model = weight.shape[0]
    embeddings = rng.normal(0.0, 1.0, (config.embedding_samples, d_model))
    labels = rng.normal(config.mean_speed, config.label_noise, config.embedding_samples)
    design = np.hstack([embeddings, np.ones((config.embedding_samples, 1))])
    solution = np.linalg.lstsq(design, labels, rcond=None)[0]
    weight.assign(solution[:-1].reshape(-1, 1))
    bias.assign(solution[-1:])

    held_out = rng.normal(0.0, 1.0, (config.embedding_samples, d_model))
    return float(np.mean(held_out @ weight.value[:, 0] + bias.value[0]))


'''
Function:   prefit_prior_params
Parameter:  prior  = PriorParams to fit in place
            config = PrefitConfig
            rng    = numpy Generator

Description: gamma and sigma are fitted to y = -k x^2, the attention LUT is
             drawn around 0, the speed LUT around the mean speed, and both
             speed nets are regressed on noisy mean-speed labels. A fit that
             misses its tolerance is reported, not fatal.
'''
def prefit_prior_params(prior, config, rng):
    if abs(prior.mean_speed - config.mean_speed) > 1e-12:
        raise PriorError('prefit: prior built for mean speed {} but config says {}'
                         .format(prior.mean_speed, config.mean_speed))
    gamma_mse = _fit_scalar_net(prior, prior.gamma_params, config)
    sigma_mse = _fit_scalar_net(prior, prior.sigma_params, config)

    n = prior.num_nodes
    prior.attn_lut.assign(rng.normal(0.0, config.label_noise, (n, n)))
    prior.speed_lut.assign(rng.normal(config.mean_speed, config.label_noise, (n, n)))
    nu_o_mean = _fit_speed_net(prior.nu_o_w, prior.nu_o_b, config, rng)
    nu_d_mean = _fit_speed_net(prior.nu_d_w, prior.nu_d_b, config, rng)

    report = PrefitReport(prior.name, gamma_mse, sigma_mse, nu_o_mean, nu_d_mean, config.tolerance)
    logging.info(' * %s: gamma mse %.2e, sigma mse %.2e, nu_o %.3f, nu_d %.3f',
                 prior.name, gamma_mse, sigma_mse, nu_o_mean, nu_d_mean)
    if not report.converged:
        logging.warning('pre-fit of %s missed tolerance %g (gamma %.2e, sigma %.2e)',
                        prior.name, config.tolerance, gamma_mse, sigma_mse)
    return report


def prefit_priors(config, num_nodes, blocks, heads, d_model, t_max, hidden=16, seed=0):
    rng = np.random.default_rng(seed)
    logging.info('* pre-fitting priors for %d blocks x %d heads', blocks, heads)
    grid = []
    for block in range(blocks):
        row = []
        for head in range(heads):
            prior = PriorParams(num_nodes, d_model, t_max, config.mean_speed, hidden,
                                config.deviation_range, rng,
                                name='block{}.head{}.prior'.format(block, head))
            prefit_prior_params(prior, config, rng)
            row.append(prior)
        grid.append(row)
    return grid
