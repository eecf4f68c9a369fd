from .vit import (TeacherConfig, TeacherError, TeacherSignal, ViTTeacher,
                  init_teacher_params, teacher_accuracy, teacher_forward,
                  train_toy_teacher)
from .features import (FeatureFileError, FileTeacher, export_features,
                       read_features, write_features)

__all__ = [
    "TeacherSignal", "TeacherConfig", "TeacherError", "ViTTeacher",
    "init_teacher_params", "teacher_forward", "train_toy_teacher",
    "teacher_accuracy", "FileTeacher", "export_features", "read_features",
    "write_features", "FeatureFileError",
]
