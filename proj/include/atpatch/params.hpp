#pragma once

#include <atpatch/autograd.hpp>
#include <atpatch/errors.hpp>
#include <atpatch/tensor.hpp>

#include <map>
#include <string>
#include <vector>

namespace atpatch {

using ParamMap = std::map<std::string, Tensor>;

/// Resolves parameter names to Vars on one tape, one leaf per name.
/// Bound mutably, tensors become gradient leaves; bound const, they are
/// borrowed constants and never receive gradients.
class ParamBinder {
public:
    ParamBinder(Tape& tape, const ParamMap& params) : tape_(tape), cparams_(&params) {}
    ParamBinder(Tape& tape, ParamMap& params, bool trainable)
        : tape_(tape), cparams_(&params), mparams_(trainable ? &params : nullptr) {}

    Tape& tape() const noexcept { return tape_; }

    Var operator()(const std::string& name) {
        if (auto it = cache_.find(name); it != cache_.end()) return it->second;
        auto found = cparams_->find(name);
        if (found == cparams_->end()) throw ContractError("unknown parameter '" + name + "'");
        Var v = mparams_ ? tape_.parameter(mparams_->at(name)) : tape_.constant_ref(found->second);
        cache_.emplace(name, v);
        return v;
    }

private:
    Tape& tape_;
    const ParamMap* cparams_;
    ParamMap* mparams_ = nullptr;
    std::map<std::string, Var> cache_;
};

inline std::vector<Tensor*> parameter_list(ParamMap& params) {
    std::vector<Tensor*> out;
    out.reserve(params.size());
    for (auto& [name, t] : params) out.push_back(&t);
    return out;
}

/// Checks that `loaded` holds exactly the tensors of `reference` with matching shapes.
inline void check_param_shapes(const ParamMap& reference, ParamMap& loaded) {
    for (const auto& [name, t] : reference) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw IoError("checkpoint missing tensor '" + name + "'");
        if (it->second.shape() != t.shape()) {
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                          shape_str(t.shape()));
        }
        it->second.requires_grad = true;
    }
}

} // namespace atpatch
