#include "duet/teacher.hpp"

namespace duet {

const char* to_string(TeacherMode m) {
  switch (m) {
    case TeacherMode::kOnline:
      return "online";
    case TeacherMode::kMomentum:
      return "momentum";
    case TeacherMode::kPeriodic:
      return "periodic";
    case TeacherMode::kOffline:
      return "offline";
  }
  return "?";
}

TeacherMode teacher_mode_from_string(const std::string& s) {
  if (s == "online") return TeacherMode::kOnline;
  if (s == "momentum") return TeacherMode::kMomentum;
  if (s == "periodic") return TeacherMode::kPeriodic;
  if (s == "offline") return TeacherMode::kOffline;
  throw ConfigError("distillation.teacher", "unknown teacher mode '" + s + "'");
}

void TeacherConfig::validate() const {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw ConfigError("distillation.momentum", "must lie in [0, 1]");
  }
  if (copy_period < 1) throw ConfigError("distillation.copy_period", "must be >= 1");
  if (mode == TeacherMode::kOffline && checkpoint.empty()) {
    throw ConfigError("distillation.teacher_checkpoint", "offline teacher needs a checkpoint");
  }
}

}  // namespace duet
