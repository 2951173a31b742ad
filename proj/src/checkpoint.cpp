#include "quadbev/checkpoint.hpp"

#include "quadbev/arrayio.hpp"
#include "quadbev/error.hpp"

namespace qbev::train {

namespace {
constexpr char kMagic[4] = {'Q', 'B', 'C', 'K'};
}

void save_checkpoint(const std::string& path, const nets::QuadModel& model,
                     const AdamW* optimizer, const losses::GradNormState* gradnorm,
                     const Rng* rng, const CheckpointMeta& meta) {
  std::vector<io::NamedArray> arrays;
  arrays.push_back(io::NamedArray::from_ints(
      "meta", {meta.stage_id, meta.epoch, static_cast<int32_t>(meta.global_step & 0x7fffffff),
               static_cast<int32_t>(meta.global_step >> 31)}));
  const auto& params = model.params();
  for (int i = 0; i < params.size(); ++i)
    arrays.push_back(
        io::NamedArray::from_tensor_f64("param/" + params.at(i).name, params.at(i).value));
  const auto& buffers = model.buffers();
  for (int i = 0; i < buffers.size(); ++i)
    arrays.push_back(
        io::NamedArray::from_tensor_f64("buffer/" + buffers.at(i).name, buffers.at(i).value));
  if (optimizer) {
    AdamW& opt = const_cast<AdamW&>(*optimizer);
    for (int i = 0; i < params.size(); ++i) {
      arrays.push_back(io::NamedArray::from_tensor_f64("opt/m/" + params.at(i).name, opt.m(i)));
      arrays.push_back(io::NamedArray::from_tensor_f64("opt/v/" + params.at(i).name, opt.v(i)));
    }
    arrays.push_back(io::NamedArray::from_ints(
        "opt/t", {static_cast<int32_t>(optimizer->t() & 0x7fffffff)}));
  }
  if (gradnorm) {
    arrays.push_back(io::NamedArray::from_tensor_f64(
        "gradnorm/w", Tensor({static_cast<int>(gradnorm->w.size())}, gradnorm->w)));
    arrays.push_back(io::NamedArray::from_tensor_f64(
        "gradnorm/l0", Tensor({static_cast<int>(gradnorm->l0.size())}, gradnorm->l0)));
    arrays.push_back(io::NamedArray::from_tensor_f64(
        "gradnorm/hyper", Tensor({2}, {gradnorm->a_gn, gradnorm->lr_w})));
    std::vector<int32_t> flags{gradnorm->l0_set ? 1 : 0, gradnorm->include_depth ? 1 : 0,
                               gradnorm->n_tasks};
    for (uint8_t f : gradnorm->l0_fallback) flags.push_back(f);
    arrays.push_back(io::NamedArray::from_ints("gradnorm/flags", flags));
  }
  if (rng) {
    const std::string s = rng->serialize();
    arrays.push_back(io::NamedArray::from_bytes(
        "rng", std::vector<uint8_t>(s.begin(), s.end())));
  }
  io::write_record(path, kMagic, kCheckpointVersion, arrays);
}

LoadedCheckpoint load_checkpoint(const std::string& path, nets::QuadModel& model,
                                 AdamW* optimizer) {
  const io::Record rec = io::read_record(path, kMagic, kCheckpointVersion);
  LoadedCheckpoint out;
  const auto meta = rec.get("meta").to_ints();
  out.meta.stage_id = meta[0];
  out.meta.epoch = meta[1];
  out.meta.global_step = static_cast<long>(meta[2]) | (static_cast<long>(meta[3]) << 31);

  auto& params = model.params();
  for (int i = 0; i < params.size(); ++i) {
    Tensor t = rec.get("param/" + params.at(i).name).to_tensor();
    check(t.same_shape(params.at(i).value), ErrCode::corrupt,
          "checkpoint parameter shape mismatch: " + params.at(i).name);
    params.at(i).value = std::move(t);
  }
  auto& buffers = model.buffers();
  for (int i = 0; i < buffers.size(); ++i) {
    Tensor t = rec.get("buffer/" + buffers.at(i).name).to_tensor();
    check(t.same_shape(buffers.at(i).value), ErrCode::corrupt,
          "checkpoint buffer shape mismatch: " + buffers.at(i).name);
    buffers.at(i).value = std::move(t);
  }
  if (optimizer && rec.has("opt/t")) {
    out.has_optimizer = true;
    for (int i = 0; i < params.size(); ++i) {
      optimizer->m(i) = rec.get("opt/m/" + params.at(i).name).to_tensor();
      optimizer->v(i) = rec.get("opt/v/" + params.at(i).name).to_tensor();
    }
    optimizer->set_t(rec.get("opt/t").to_ints()[0]);
  }
  if (rec.has("gradnorm/w")) {
    out.has_gradnorm = true;
    const Tensor w = rec.get("gradnorm/w").to_tensor();
    const Tensor l0 = rec.get("gradnorm/l0").to_tensor();
    const Tensor hyper = rec.get("gradnorm/hyper").to_tensor();
    const auto flags = rec.get("gradnorm/flags").to_ints();
    out.gradnorm.n_tasks = flags[2];
    out.gradnorm.w.assign(w.data(), w.data() + w.numel());
    out.gradnorm.l0.assign(l0.data(), l0.data() + l0.numel());
    out.gradnorm.a_gn = hyper[0];
    out.gradnorm.lr_w = hyper[1];
    out.gradnorm.l0_set = flags[0] != 0;
    out.gradnorm.include_depth = flags[1] != 0;
    out.gradnorm.l0_fallback.clear();
    for (size_t i = 3; i < flags.size(); ++i)
      out.gradnorm.l0_fallback.push_back(static_cast<uint8_t>(flags[i]));
  }
  if (rec.has("rng")) {
    out.has_rng = true;
    const auto& raw = rec.get("rng").raw;
    out.rng_state.assign(raw.begin(), raw.end());
  }
  return out;
}

}  // namespace qbev::train
