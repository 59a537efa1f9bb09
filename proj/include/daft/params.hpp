#pragma once

#include <map>
#include <string>

#include "daft/tensor.hpp"

namespace daft {

// A named trainable buffer living outside any tape. Each forward pass binds
// it onto a tape as a leaf; gradients are harvested back after backward().
struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> m, v;  // Adam moments
    bool trainable = true;
};

class ParamStore {
public:
    int add(const std::string& name, const Shape& shape, bool trainable = true) {
        if (by_name_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        Param p;
        p.name = name;
        p.shape = shape;
        size_t n = size_t(numel(shape));
        p.value.assign(n, 0.0);
        p.grad.assign(n, 0.0);
        p.m.assign(n, 0.0);
        p.v.assign(n, 0.0);
        p.trainable = trainable;
        params_.push_back(std::move(p));
        int id = int(params_.size()) - 1;
        by_name_[name] = id;
        return id;
    }

    Param& at(int id) { return params_[size_t(id)]; }
    const Param& at(int id) const { return params_[size_t(id)]; }
    int count() const { return int(params_.size()); }

    int find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? -1 : it->second;
    }

    void zero_grad() {
        for (Param& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
    }

    std::vector<int> trainable_ids() const {
        std::vector<int> ids;
        for (int i = 0; i < count(); ++i)
            if (params_[size_t(i)].trainable) ids.push_back(i);
        return ids;
    }

private:
    std::vector<Param> params_;
    std::map<std::string, int> by_name_;
};

// init helpers
inline void fill_normal(Param& p, Rng& rng, double scale) {
    for (double& v : p.value) v = rng.normal() * scale;
}

inline void fill_const(Param& p, double c) { std::fill(p.value.begin(), p.value.end(), c); }

// Binds parameters onto one tape, each at most once, and harvests gradients
// back into the store after backward().
class Binder {
public:
    Binder(Tape& tape, ParamStore& store, bool with_grad)
        : tape_(&tape), store_(&store), with_grad_(with_grad) {}

    Tensor operator()(int pid) {
        auto it = bound_.find(pid);
        if (it != bound_.end()) return Tensor(tape_, it->second);
        Param& p = store_->at(pid);
        Tensor t = tape_->leaf(p.shape, p.value, with_grad_ && p.trainable);
        bound_[pid] = t.id();
        return t;
    }

    // accumulate leaf gradients into Param::grad
    void harvest() {
        for (auto& [pid, node_id] : bound_) {
            const Node& n = tape_->node(node_id);
            if (!n.requires_grad || n.grad.empty()) continue;
            Param& p = store_->at(pid);
            for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        }
    }

    Tape& tape() { return *tape_; }

private:
    Tape* tape_;
    ParamStore* store_;
    bool with_grad_;
    std::map<int, int> bound_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& store, const std::vector<int>& pids) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (int pid : pids) {
            Param& p = store.at(pid);
            if (!p.trainable) continue;
            for (size_t i = 0; i < p.value.size(); ++i) {
                double g = p.grad[i];
                p.m[i] = cfg_.beta1 * p.m[i] + (1.0 - cfg_.beta1) * g;
                p.v[i] = cfg_.beta2 * p.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = p.m[i] / bc1;
                double vhat = p.v[i] / bc2;
                p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }
    AdamConfig& config() { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace daft
