# ==================== 配置文件 ====================
# 仿真器的所有默认参数都集中在这里，实验文件 (configs/*.json) 中未给出的字段回落到这些值

import os

BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# ==================== 文件配置 ====================
KINDS_FILE = os.path.join(BASE_DIR, "kinds.json")   # 车辆种类及隶属函数表
RULES_FILE = os.path.join(BASE_DIR, "rules.json")   # 两个模糊规则模块
LOG_DIR = "log"                                      # 日志目录
OUTPUT_DIR = "results"                               # 默认输出目录

# ==================== 道路与实验配置 ====================
ROAD_LENGTH = 5000.0        # 路段长度 L (米)
LANES = 3                   # 车道数 M
ITERATIONS = 1000           # 每次实验的迭代步数 (1 步 = 1 秒)
REPETITIONS = 100           # 同一实验的重复次数
EMISSION_RATE = 1.5         # 总发车率 λ (辆/秒)，每条车道为 λ/M
LONG_FRACTION = 0.0         # 长车比例 p
INFLUENCE_RADIUS = 10.0     # 收费站影响半径 ρ (米)
OPEN_TOLLING = -1           # ρ = -1 表示开放式收费 (不减速不停车)
OBSTACLE = "none"           # 障碍物位置: none / left / right
SEED = 20120913             # 默认随机种子
PASSENGER_KIND = "passenger"
LONG_KIND = "long"

# ==================== 模型常量 ====================
TIME_STEP = 1.0                 # 时间单位固定为 1 秒
STRESS_TRANSFER_DIVISOR = 5.0   # 换道后压力除以 5
LEFT_PREFERENCE = 0.7           # 拥堵时中间车道向左换道的概率
COMBINER_THRESHOLD = -0.25      # F 组合函数第二分支的阈值
NASCH_ACCELERATION = 7.5        # 常加速度模式 (确定性 NaSch)
OBSTACLE_FRACTION = 0.4         # 障碍物长度 2L/5
OBSTACLE_VID = -1               # 障碍物的伪车辆编号

# ==================== 收费站配置 ====================
CAPTURE_DISTANCE = 2.0      # 车头距停止线 2 米内视为到达收费亭
CAPTURE_SPEED = 0.5         # 低于该速度视为已停车
SERVICE_TIME = 2.0          # 默认服务时间 (秒)，可按车种覆盖

# ==================== 分析配置 ====================
THROUGHPUT_WINDOW = 10          # 每 10 秒统计一次处理车辆数和平均延误
DENSITY_BIN_WIDTH = 0.005       # 基本图密度分箱宽度 (辆/米/车道)
PHASE_CC_THRESHOLD = 0.2        # 相态划分阈值 |cc| <= 0.2 视为同步流
TOLERANCE = 1e-9                # 物理性检查的绝对容差 (米)

# ==================== 验收检查配置 ====================
FREE_FLOW_MAX_DENSITY = 0.02    # 自由流斜率只用每车道密度低于该值的样本 (辆/米/车道)
FREE_FLOW_SLOPE_TOLERANCE = 0.15  # 自由流斜率与 v_opt 的相对误差上限
LOADING_WINDOW = 60             # 初始加载阶段 (秒)
LOADING_MIN_CC = 0.6            # 加载阶段 cc 的下限
SYNCHRONIZED_MIN_RUN = 20       # 同步流窗口的最短连续秒数
SATURATED_TAIL_FRACTION = 0.2   # 最后 20% 的时刻视为饱和段
CC_SMOOTHING = 11               # 判断相态前对 cc(t) 做的滑动平均宽度
THREE_PHASE_REPETITIONS = 50    # 三相检查至少需要的重复次数
OBSTACLE_MIN_DROP = 0.05        # 障碍物导致的峰值流量最小降幅
HETEROGENEITY_FRACTIONS = [0.0, 0.1, 0.2, 0.3]
DETERMINISM_SWEEP_CONFIGS = 10  # 确定性检查从扫参网格中均匀抽取的配置数
DETERMINISM_ITERATIONS = 200    # 确定性检查每个配置的迭代步数上限

# ==================== 扫参配置 ====================
SWEEP_EMISSION_RATES = [0.25, 0.5, 1.0, 1.5, 2.0]
SWEEP_LONG_FRACTIONS = [0.0, 0.1, 0.2, 0.3]
SWEEP_INFLUENCE_RADII = [10.0, 25.0, 50.0, OPEN_TOLLING]
SWEEP_OBSTACLES = ["none", "left", "right"]

# ==================== 并行配置 ====================
WORKERS = 1                 # 重复实验的并行进程数，1 表示顺序执行

# ==================== 日志配置 ====================
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PROGRESS_LOG_INTERVAL = 100     # 每 100 步输出一次进度 (DEBUG)
