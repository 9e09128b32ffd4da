// Train on a few synthetic phantoms, score a held-out one, and report model size.
#include <cstdio>

#include "pshop/pshop.hpp"

int main() {
  using namespace pshop;
  try {
    PhantomOptions opt;  // 64x64x16 at 0.625/0.625/1.5 mm
    const auto train_set = make_phantoms(4, 1, opt);
    const auto test_set = make_phantoms(1, 2, opt);

    PipelineConfig cfg = default_config(Task::gland);
    cfg.preprocess.resize_h = cfg.preprocess.resize_w = 64;
    cfg.decoder.main.rounds = 40;  // defaults are 300 / 100; fewer rounds keep this quick
    cfg.decoder.refine.rounds = 15;

    const SegmentationModel model = train(train_set, cfg);
    const EvalReport report = evaluate(model, test_set);

    std::printf("held-out DSC: %.4f\n", report.per_class.at(0).mean);
    std::printf("parameters: %llu\n", static_cast<unsigned long long>(report.params.total()));
    std::printf("FLOPs per slice: %llu\n", static_cast<unsigned long long>(report.flops.per_slice()));

    save_model(model, "quickstart.pshop");
    const auto again = predict(load_model("quickstart.pshop"), test_set[0]);
    std::printf("reloaded prediction DSC: %.4f\n", dsc(again.labels, *test_set[0].mask));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
