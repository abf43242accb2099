# 组配准应用包
