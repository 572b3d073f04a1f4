#include "eraser/schedule.h"

#include <cmath>

namespace eraser {

namespace {

void require(bool ok, const std::string & msg) {
    if (!ok) throw contract_error(msg);
}

} // namespace

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    require(T >= 2, "schedule: T must be >= 2");
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
            "schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.assign(static_cast<size_t>(T) + 1, 0.0);
    s.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        double frac = static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.betas[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - s.betas[static_cast<size_t>(t)]);
    }
    return s;
}

double NoiseSchedule::abar(int t) const {
    require(t >= 0 && t <= T, "schedule: step " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
    return alpha_bar[static_cast<size_t>(t)];
}

double NoiseSchedule::sigma(int t, int t_prev, double eta) const {
    require(t_prev >= 0 && t_prev < t, "sigma: need 0 <= t_prev < t");
    double ab = abar(t);
    double abp = abar(t_prev);
    return eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp);
}

std::vector<double> NoiseSchedule::sigma_table(double eta) const {
    std::vector<double> out(static_cast<size_t>(T) + 1, 0.0);
    for (int t = 1; t <= T; ++t) out[static_cast<size_t>(t)] = sigma(t, t - 1, eta);
    return out;
}

std::vector<int> NoiseSchedule::stride_grid(int steps) const {
    require(steps >= 1 && steps <= T, "stride_grid: steps must lie in [1,T]");
    require(T % steps == 0, "stride_grid: steps must divide T");
    int k = T / steps;
    std::vector<int> grid(static_cast<size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) grid[static_cast<size_t>(i)] = i * k;
    return grid;
}

Tensor q_sample(const Tensor & x0, const Tensor & eps, int t, const NoiseSchedule & sched) {
    require(x0.same_shape(eps), "q_sample: x0/eps shape mismatch");
    require(t >= 1 && t <= sched.T, "q_sample: t must lie in [1,T]");
    double ab = sched.abar(t);
    float c0 = static_cast<float>(std::sqrt(ab));
    float c1 = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor out(x0.shape);
    for (int64_t i = 0; i < x0.size(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
    return out;
}

Tensor ddim_map(const Tensor & z, const Tensor & eps_x0, const Tensor & eps_dir, int t_from, int t_to,
                const NoiseSchedule & sched) {
    require(z.same_shape(eps_x0) && z.same_shape(eps_dir), "ddim_map: shape mismatch");
    double abf = sched.abar(t_from);
    double abt = sched.abar(t_to);
    float c1 = static_cast<float>(std::sqrt(1.0 - abf));
    float c2 = static_cast<float>(1.0 / std::sqrt(abf));
    float c3 = static_cast<float>(std::sqrt(abt));
    float c4 = static_cast<float>(std::sqrt(1.0 - abt));
    Tensor out(z.shape);
    for (int64_t i = 0; i < z.size(); ++i) {
        float x0 = (z[i] - c1 * eps_x0[i]) * c2;
        out[i] = c3 * x0 + c4 * eps_dir[i];
    }
    return out;
}

Tensor ddim_step(const Tensor & z, const Tensor & eps, int t, int t_prev, const NoiseSchedule & sched,
                 double eta, const Tensor * noise) {
    require(t_prev >= 0 && t_prev < t, "ddim_step: need 0 <= t_prev < t");
    if (eta == 0.0) return ddim_map(z, eps, eps, t, t_prev, sched);

    require(noise != nullptr && noise->same_shape(z), "ddim_step: eta > 0 needs noise of matching shape");
    double ab = sched.abar(t);
    double abp = sched.abar(t_prev);
    double sig = sched.sigma(t, t_prev, eta);
    double dir2 = 1.0 - abp - sig * sig;
    require(dir2 >= 0.0, "ddim_step: eta too large, direction coefficient negative");
    float c1 = static_cast<float>(std::sqrt(1.0 - ab));
    float c2 = static_cast<float>(1.0 / std::sqrt(ab));
    float c3 = static_cast<float>(std::sqrt(abp));
    float c4 = static_cast<float>(std::sqrt(dir2));
    float c5 = static_cast<float>(sig);
    Tensor out(z.shape);
    for (int64_t i = 0; i < z.size(); ++i) {
        float x0 = (z[i] - c1 * eps[i]) * c2;
        out[i] = c3 * x0 + c4 * eps[i] + c5 * (*noise)[i];
    }
    return out;
}

Tensor ddim_invert_step(const Tensor & z, const Tensor & eps, int t, int t_next,
                        const NoiseSchedule & sched) {
    require(t >= 0 && t_next > t, "ddim_invert_step: need t_next > t >= 0");
    return ddim_map(z, eps, eps, t, t_next, sched);
}

Tape::Id ddim_map_node(Tape & tape, Tape::Id z, Tape::Id eps_x0, Tape::Id eps_dir, int t_from, int t_to,
                       const NoiseSchedule & sched) {
    double abf = sched.abar(t_from);
    double abt = sched.abar(t_to);
    // Same operation order as the eager ddim_map so both produce identical
    // bits; the optimizer then scores exactly the trajectory a replay sees.
    float c1 = static_cast<float>(std::sqrt(1.0 - abf));
    float c2 = static_cast<float>(1.0 / std::sqrt(abf));
    float c3 = static_cast<float>(std::sqrt(abt));
    float c4 = static_cast<float>(std::sqrt(1.0 - abt));
    Tape::Id x0 = tape.mul_scalar(tape.sub(z, tape.mul_scalar(eps_x0, c1)), c2);
    return tape.lincomb(c3, x0, c4, eps_dir);
}

} // namespace eraser
