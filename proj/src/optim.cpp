#include "modal_emu/optim.hpp"

#include <cmath>
#include <map>

namespace modal_emu {

Adam::Adam(ParameterList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void Adam::step() {
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            const double mh = m[j] / c1;
            const double vh = v[j] / c2;
            w[j] -= cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.epsilon);
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

ParameterList Adam::state() const {
    ParameterList out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Shape& s = params_[i].tensor.shape();
        out.push_back({"adam.m/" + params_[i].name, Tensor::from(s, m_[i])});
        out.push_back({"adam.v/" + params_[i].name, Tensor::from(s, v_[i])});
    }
    return out;
}

void Adam::load_state(const ParameterList& state, std::size_t steps) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : state) by_name[t.name] = &t.tensor;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        for (auto [prefix, dst] : {std::pair{"adam.m/", &m_[i]}, std::pair{"adam.v/", &v_[i]}}) {
            const auto it = by_name.find(prefix + params_[i].name);
            if (it == by_name.end()) throw ContractError("optimizer state missing " + std::string(prefix) + params_[i].name);
            if (it->second->shape() != params_[i].tensor.shape())
                throw DimensionError("optimizer state shape mismatch for " + params_[i].name);
            *dst = it->second->values();
        }
    }
    steps_ = steps;
}

}  // namespace modal_emu
